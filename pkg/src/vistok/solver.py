"""Image-to-sequence task solver with soft-token decoding.

A conv patch stem plus pre-norm transformer encoder turns the image into a
memory sequence; a causal decoder with cross-attention then emits the task's
token ids one step at a time. Each generation step can feed the next input
either as the argmax token's embedding (hard) or as the probability-weighted
average of the whole embedding table (soft), and detokenization can likewise
consume hard ids or the retained per-step distributions. A bank of learned
queries decodes all depth positions in a single non-causal pass as an
alternative to autoregression.

Training is teacher-forced cross-entropy over target sequences, honoring
each sequence's loss mask, optionally plus an auxiliary reconstruction loss
that pushes softmax outputs through the frozen detokenizer and compares
against the raw depth map or mask crop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import (
    COORD_TOKENS,
    EOS,
    MASK_GRID,
    MASK_TOKENS,
    PAD,
    TASK_DEPTH,
    TASK_INSTANCE,
    TOKENS_PER_INSTANCE,
    DecodeError,
    TokenSequence,
    Vocabulary,
    decode_instances,
    encode_depth,
    encode_instances,
    restrict_probs,
    soft_depth_probs,
)
from .metrics import mask_metrics
from .nn import Conv2d, Embedding, LayerNorm, Linear, Module, ModuleList
from .optim import Parameter, TrainConfig, adam_step, zero_grads
from .tensor import DimensionError, Tensor
from .tokenizers import DepthMap, TrainingDiverged


@dataclass(frozen=True)
class SolverConfig:
    vocab_size: int
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 6
    n_decoder_blocks: int = 6
    patch_size: int = 8
    in_channels: int = 1
    memory_grid: tuple = (8, 8)  # largest patch grid the positional table covers
    max_seq_len: int = 160
    depth_grid: tuple = (2, 2)  # depth token grid; fixes the generation length
    ffn_mult: int = 4
    task_tokens: tuple = (("dep", TASK_DEPTH), ("ins", TASK_INSTANCE))

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.n_heads} heads"
            )
        if self.vocab_size <= max(tok for _, tok in self.task_tokens):
            raise ValueError(f"vocabulary of {self.vocab_size} cannot hold the task tokens")
        if self.depth_tokens + 1 > self.max_seq_len:
            raise ValueError(
                f"depth grid {self.depth_grid} needs {self.depth_tokens + 1} positions, "
                f"max_seq_len is {self.max_seq_len}"
            )

    @property
    def depth_tokens(self):
        return self.depth_grid[0] * self.depth_grid[1]

    def task_token(self, task):
        for name, tok in self.task_tokens:
            if name == task:
                return tok
        raise ValueError(f"unknown task {task!r}; tasks are {[n for n, _ in self.task_tokens]}")


@dataclass(frozen=True)
class DecodeOptions:
    mode: str = "hard"  # "hard" | "soft": how generated steps are fed back
    temperature: float = 1.0
    max_instances: int = None
    parallel: bool = False
    soft_detok: bool = None  # None: follow mode; else force the detokenizer side

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"decode mode must be 'hard' or 'soft', got {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def detok_soft(self):
        return self.mode == "soft" if self.soft_detok is None else self.soft_detok


@dataclass(frozen=True)
class LossConfig:
    token_loss_weights: tuple = (("ins", 5.0), ("dep", 1.0))
    aux_loss_weight: float = 0.0
    train_parallel: bool = False  # also fit the parallel depth head

    def __post_init__(self):
        if any(w < 0 for _, w in self.token_loss_weights) or self.aux_loss_weight < 0:
            raise ValueError("loss weights must be nonnegative")

    def token_weight(self, task):
        for name, w in self.token_loss_weights:
            if name == task:
                return w
        raise ValueError(f"no token loss weight for task {task!r}")


# -- model ----------------------------------------------------------------------


class MultiHeadAttention(Module):
    def __init__(self, dim, n_heads, rng):
        super().__init__()
        self.n_heads = n_heads
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(dim, dim, rng)
        self.proj_v = Linear(dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def _split(self, x):
        b, l, d = x.shape
        h = self.n_heads
        return T.transpose(T.reshape(x, (b, l, h, d // h)), (0, 2, 1, 3))

    def forward(self, query, context, causal=False):
        b, lq, d = query.shape
        q = self._split(self.proj_q(query))
        k = self._split(self.proj_k(context))
        v = self._split(self.proj_v(context))
        o = T.scaled_dot_product_attention(q, k, v, causal_mask=causal)
        return self.proj_out(T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, lq, d)))


class FeedForward(Module):
    def __init__(self, dim, mult, rng):
        super().__init__()
        self.up = Linear(dim, dim * mult, rng)
        self.down = Linear(dim * mult, dim, rng)

    def forward(self, x):
        return self.down(T.relu(self.up(x)))


class EncoderBlock(Module):
    def __init__(self, dim, n_heads, mult, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, mult, rng)

    def forward(self, x):
        h = self.norm1(x)
        x = T.add(x, self.attn(h, h))
        return T.add(x, self.ffn(self.norm2(x)))


class DecoderBlock(Module):
    def __init__(self, dim, n_heads, mult, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, mult, rng)

    def forward(self, x, memory, causal=True):
        h = self.norm1(x)
        x = T.add(x, self.self_attn(h, h, causal=causal))
        x = T.add(x, self.cross_attn(self.norm2(x), memory))
        return T.add(x, self.ffn(self.norm3(x)))


def _small_init(rng, shape):
    return Parameter((rng.standard_normal(shape) * 0.02).astype(np.float32))


class TaskSolver(Module):
    def __init__(self, config: SolverConfig, rng):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.stem = Conv2d(config.in_channels, d, config.patch_size, rng,
                           stride=config.patch_size)
        mh, mw = config.memory_grid
        self.enc_pos = _small_init(rng, (mh * mw, d))
        self.enc_blocks = ModuleList(
            [EncoderBlock(d, config.n_heads, config.ffn_mult, rng)
             for _ in range(config.n_encoder_blocks)]
        )
        self.enc_norm = LayerNorm(d)
        self.tok_emb = Embedding(config.vocab_size, d, rng)
        self.dec_pos = _small_init(rng, (config.max_seq_len, d))
        self.dec_blocks = ModuleList(
            [DecoderBlock(d, config.n_heads, config.ffn_mult, rng)
             for _ in range(config.n_decoder_blocks)]
        )
        self.dec_norm = LayerNorm(d)
        self.head = Linear(d, config.vocab_size, rng)
        self.depth_queries = _small_init(rng, (config.depth_tokens, d))

    def encode(self, images: Tensor) -> Tensor:
        """[N, C, H, W] -> memory [N, (H/p)(W/p), embed_dim]."""
        n, c, h, w = images.shape
        p = self.config.patch_size
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        mh, mw = self.config.memory_grid
        if gh > mh or gw > mw:
            raise DimensionError(
                f"patch grid {gh}x{gw} exceeds the {mh}x{mw} positional table"
            )
        x = T.transpose(T.reshape(self.stem(images), (n, self.config.embed_dim, gh * gw)),
                        (0, 2, 1))
        rows = (np.arange(gh)[:, None] * mw + np.arange(gw)[None, :]).reshape(-1)
        x = T.add(x, T.embedding_lookup(self.enc_pos, rows))
        for block in self.enc_blocks:
            x = block(x)
        return self.enc_norm(x)

    def decode_embeddings(self, emb: Tensor, memory: Tensor, causal=True) -> Tensor:
        """Input embeddings [N, T, D] (positions included) -> logits [N, T, V]."""
        x = emb
        for block in self.dec_blocks:
            x = block(x, memory, causal=causal)
        return self.head(self.dec_norm(x))

    def input_embeddings(self, ids) -> Tensor:
        """Token ids [N, T] -> token embeddings plus learned positions."""
        ids = np.asarray(ids)
        t = ids.shape[-1]
        if t > self.config.max_seq_len:
            raise DimensionError(f"sequence of {t} exceeds max_seq_len {self.config.max_seq_len}")
        return T.add(self.tok_emb(ids), T.embedding_lookup(self.dec_pos, np.arange(t)))


def build_solver(config: SolverConfig, rng) -> TaskSolver:
    return TaskSolver(config, rng)


# -- inference-time decoding ------------------------------------------------------


def encode_image(model: TaskSolver, images) -> Tensor:
    """Numpy image(s) [C,H,W] or [N,C,H,W] -> memory tensor."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {images.shape}")
    return model.encode(Tensor(images))


def _step_probs(logits_row, temperature):
    z = np.asarray(logits_row, dtype=np.float64) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def decode_autoregressive(model: TaskSolver, memory: Tensor, task_token,
                          options: DecodeOptions) -> TokenSequence:
    """Generate one sequence; per-step full-vocabulary distributions retained.

    Depth generates exactly the configured grid length; instance generation
    stops at EOS, at 21 * max_instances tokens, or at max_seq_len, the last
    flagged as truncated.
    """
    cfg = model.config
    names = {tok: name for name, tok in cfg.task_tokens}
    if task_token not in names:
        raise ValueError(f"task token {task_token} is not one of {sorted(names)}")
    task = names[task_token]
    if memory.shape[0] != 1:
        raise DimensionError(f"decoding runs one image at a time, got batch {memory.shape[0]}")
    table = model.tok_emb.weight.data
    hard_cap = cfg.max_seq_len - 1  # one position goes to the task token
    cap = cfg.depth_tokens if task == "dep" else hard_cap
    if task == "ins" and options.max_instances is not None:
        cap = min(cap, options.max_instances * TOKENS_PER_INSTANCE + 1)
    ids, probs = [], []
    emb = [table[task_token]]
    with T.no_grad():
        while len(ids) < cap:
            x = T.add(Tensor(np.stack(emb)[None]), Tensor(model.dec_pos.data[None, : len(emb)]))
            logits = model.decode_embeddings(x, memory, causal=True)
            p = _step_probs(logits.data[0, -1], options.temperature)
            tok = int(p.argmax())
            ids.append(tok)
            probs.append(p)
            if task == "dep":
                if len(ids) == cap:
                    break
            elif tok == EOS:
                break
            if options.mode == "soft":
                emb.append((p @ table).astype(np.float32))
            else:
                emb.append(table[tok])
    truncated = task == "ins" and ids[-1] != EOS and len(ids) >= hard_cap
    return TokenSequence(ids=ids, loss_mask=[True] * len(ids), task=task,
                         probs=probs, truncated=truncated)


def decode_parallel_depth(model: TaskSolver, memory: Tensor) -> np.ndarray:
    """All depth positions in one non-causal pass: [depth_tokens, V] rows summing to 1."""
    if memory.shape[0] != 1:
        raise DimensionError(f"decoding runs one image at a time, got batch {memory.shape[0]}")
    with T.no_grad():
        logits = model.decode_embeddings(Tensor(model.depth_queries.data[None]),
                                         memory, causal=False)
    z = np.asarray(logits.data[0], dtype=np.float64)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _snap_instance_ids(seq: TokenSequence, vocab: Vocabulary) -> TokenSequence:
    """Re-pick every generated token inside its record slot's vocabulary slice.

    Generation is unconstrained over the full vocabulary, so a stray argmax
    can land outside the slice its position calls for; the retained
    distributions still rank the in-slice candidates. Trailing partial
    records are dropped.
    """
    if seq.probs is None:
        return seq
    ids = list(seq.ids)
    terminated = bool(ids) and ids[-1] == EOS
    body = ids[:-1] if terminated else ids
    n_rec = len(body) // TOKENS_PER_INSTANCE
    slots = ([vocab.coord_range] * COORD_TOKENS + [vocab.class_range]
             + [vocab.mask_range] * MASK_TOKENS)
    out, out_probs = [], []
    for r in range(n_rec):
        for s, (start, _stop) in enumerate(slots):
            pos = r * TOKENS_PER_INSTANCE + s
            p = restrict_probs(seq.probs[pos], slots[s])
            out.append(start + int(np.argmax(p)))
            out_probs.append(seq.probs[pos])
    if terminated:
        out.append(EOS)
        out_probs.append(seq.probs[len(seq.ids) - 1])
    return TokenSequence(ids=out, loss_mask=[True] * len(out), task="ins",
                         probs=out_probs, truncated=seq.truncated)


def infer(model: TaskSolver, image, task, options: DecodeOptions, detokenizer,
          vocab: Vocabulary):
    """Full pipeline: encode, decode, restrict distributions, detokenize.

    Returns a DepthMap for "dep" or a list of InstanceAnnotation for "ins".
    """
    memory = encode_image(model, image)
    cfg = model.config
    if task == "dep":
        gh, gw = cfg.depth_grid
        if options.parallel:
            rows = decode_parallel_depth(model, memory)
            soft = np.stack([restrict_probs(r, vocab.depth_range) for r in rows])
            soft = soft.reshape(gh, gw, vocab.k_depth)
        else:
            seq = decode_autoregressive(model, memory, cfg.task_token("dep"), options)
            soft = soft_depth_probs(seq, (gh, gw), vocab)
        if options.detok_soft:
            values = detokenizer.detokenize_soft(soft.astype(np.float32))
        else:
            values = detokenizer.detokenize(soft.argmax(axis=-1))
        return DepthMap(values=values, valid=np.ones(values.shape, dtype=bool))
    if task == "ins":
        seq = decode_autoregressive(model, memory, cfg.task_token("ins"), options)
        snapped = _snap_instance_ids(seq, vocab)
        if not options.detok_soft:
            snapped = TokenSequence(ids=snapped.ids, loss_mask=snapped.loss_mask,
                                    task="ins", truncated=snapped.truncated)
        return decode_instances(snapped, detokenizer, vocab)
    raise ValueError(f"unknown task {task!r}")


# -- training ---------------------------------------------------------------------


@dataclass
class SolverExample:
    image: np.ndarray  # [C, H, W] float32
    tokens: TokenSequence
    depth: DepthMap = None  # raw depth target (aux loss + evaluation)
    crops: list = None  # raw [64, 64] crops aligned with the real records
    gt_pairs: list = None  # (class_id, full-res bool mask) evaluation truth


@dataclass
class SolverDataset:
    vocab: Vocabulary
    examples: dict  # task name -> list of SolverExample


def build_solver_dataset(scenes, tokenizers, vocab: Vocabulary, tasks=("dep", "ins"),
                         n_noise=2, seed=0) -> SolverDataset:
    """Tokenize synthetic scenes into per-task training examples."""
    examples = {task: [] for task in tasks}
    for index, scene in enumerate(scenes):
        image = np.asarray(scene.image, dtype=np.float32)
        if "dep" in tasks:
            grid = tokenizers["dep"].tokenize(scene.depth)
            examples["dep"].append(
                SolverExample(image=image, tokens=encode_depth(grid, vocab),
                              depth=scene.depth)
            )
        if "ins" in tasks:
            rng = np.random.default_rng((seed, index))
            seq, order = encode_instances(scene.instances, tokenizers["ins"], vocab,
                                          n_noise, rng, return_order=True)
            crops = [scene.instances[j].mask64.astype(np.float32) for j in order]
            gt_pairs = [(inst.class_id, mask)
                        for inst, mask in zip(scene.instances, scene.masks)]
            examples["ins"].append(
                SolverExample(image=image, tokens=seq, crops=crops, gt_pairs=gt_pairs)
            )
    return SolverDataset(vocab=vocab, examples=examples)


def teacher_forced_logits(model: TaskSolver, memory: Tensor, seqs):
    """Batch of same-task sequences -> (logits [B,T,V], targets [B,T], keep [B,T]).

    Inputs are the task token followed by the targets shifted right; rows are
    padded to the longest sequence with PAD, excluded via the keep mask.
    """
    task = seqs[0].task
    if any(s.task != task for s in seqs):
        raise ValueError("teacher forcing needs a single-task batch")
    task_tok = model.config.task_token(task)
    b = len(seqs)
    t_max = max(len(s.ids) for s in seqs)
    inputs = np.full((b, t_max), PAD, dtype=np.int64)
    targets = np.full((b, t_max), PAD, dtype=np.int64)
    keep = np.zeros((b, t_max), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s.ids)
        inputs[i, 0] = task_tok
        inputs[i, 1:n] = s.ids[:-1]
        targets[i, :n] = s.ids
        keep[i, :n] = s.loss_mask
    logits = model.decode_embeddings(model.input_embeddings(inputs), memory, causal=True)
    return logits, targets, keep


def _mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


def _aux_loss(model, logits, examples, task, tokenizer, vocab):
    """Soft-detokenize predicted distributions and score them on raw targets."""
    terms = []
    if task == "dep":
        gh, gw = model.config.depth_grid
        lo, hi = tokenizer.config.input_range
        for i, ex in enumerate(examples):
            rows = T.take(logits, (i, slice(0, gh * gw)))
            probs = restrict_probs(T.softmax(rows, axis=-1), vocab.depth_range)
            out = tokenizer.decode_soft_t(probs, (gh, gw))
            t01 = np.clip((ex.depth.values - lo) / (hi - lo), 0.0, 1.0)[None, None]
            terms.append(T.masked_mse(out, t01, valid=ex.depth.valid[None, None]))
    else:
        for i, ex in enumerate(examples):
            for r, crop in enumerate(ex.crops or []):
                base = r * TOKENS_PER_INSTANCE + COORD_TOKENS + 1
                rows = T.take(logits, (i, slice(base, base + MASK_TOKENS)))
                probs = restrict_probs(T.softmax(rows, axis=-1), vocab.mask_range)
                out = tokenizer.decode_soft_logits_t(probs, (MASK_GRID, MASK_GRID))
                target = (np.asarray(crop) >= 0.5).astype(np.float32)[None, None]
                terms.append(T.bce_with_logits(out, target))
    if not terms:
        return Tensor(np.float32(0.0))
    return _mean(terms)


def _batch_loss(model, examples, task, tokenizers, loss_cfg, vocab):
    images = np.stack([ex.image for ex in examples]).astype(np.float32)
    memory = model.encode(Tensor(images))
    logits, targets, keep = teacher_forced_logits(model, memory, [ex.tokens for ex in examples])
    b, t, v = logits.shape
    ce = T.masked_cross_entropy(T.reshape(logits, (b * t, v)), targets.reshape(-1),
                                ignore_flags=~keep.reshape(-1))
    loss = T.mul(ce, loss_cfg.token_weight(task))
    if task == "dep" and loss_cfg.train_parallel:
        q = model.config.depth_tokens
        if t != q:
            raise ValueError(f"depth sequences of {t} tokens, parallel head expects {q}")
        queries = T.embedding_lookup(model.depth_queries, np.tile(np.arange(q), (b, 1)))
        par = model.decode_embeddings(queries, memory, causal=False)
        par_ce = T.masked_cross_entropy(T.reshape(par, (b * q, v)), targets.reshape(-1),
                                        ignore_flags=~keep.reshape(-1))
        loss = T.add(loss, T.mul(par_ce, loss_cfg.token_weight(task)))
    if loss_cfg.aux_loss_weight > 0:
        aux = _aux_loss(model, logits, examples, task, tokenizers[task], vocab)
        loss = T.add(loss, T.mul(aux, loss_cfg.aux_loss_weight))
    return loss, float(ce.data)


def _round_robin(dataset, tasks, batch_size, rng):
    """Interleave per-task batches in a fixed task order; indices reshuffled per epoch."""
    queues = {}
    for task in tasks:
        order = rng.permutation(len(dataset.examples[task]))
        queues[task] = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    out = []
    while any(queues.values()):
        for task in tasks:
            if queues[task]:
                out.append((task, queues[task].pop(0)))
    return out


def train_solver(model: TaskSolver, dataset: SolverDataset, tokenizers, loss_cfg: LossConfig,
                 train_cfg: TrainConfig, tasks=("dep",), log_path=None, start_epoch=0):
    """Teacher-forced training over one or more tasks, round-robin interleaved.

    Tokenizers stay frozen; they only shape the auxiliary loss. History rows
    carry mean total loss and per-task cross-entropy per epoch. Epoch rng
    streams derive from (seed, epoch), so resuming a restored model at
    ``start_epoch`` replays exactly what an uninterrupted run would do.
    """
    tasks = tuple(tasks)
    vocab = dataset.vocab
    if model.config.vocab_size != vocab.total:
        raise ValueError(
            f"solver vocabulary {model.config.vocab_size} != dataset vocabulary {vocab.total}"
        )
    if not 0 <= start_epoch <= train_cfg.epochs:
        raise ValueError(f"start epoch {start_epoch} outside [0, {train_cfg.epochs}]")
    for task in tasks:
        model.config.task_token(task)
        if not dataset.examples.get(task):
            raise ValueError(f"dataset has no examples for task {task!r}")
        if task not in tokenizers:
            raise ValueError(f"task {task!r} has no tokenizer")
    params = list(model.parameters())
    history = []
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng((train_cfg.seed, epoch))
        lr = train_cfg.lr_at(epoch)
        losses = []
        ce_sums = {task: [] for task in tasks}
        for task, idx in _round_robin(dataset, tasks, train_cfg.batch_size, rng):
            examples = [dataset.examples[task][int(i)] for i in idx]
            loss, ce = _batch_loss(model, examples, task, tokenizers, loss_cfg, vocab)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, task {task}")
            zero_grads(params)
            loss.backward()
            for p in params:
                if p.grad is None:  # e.g. parallel queries on a non-parallel batch
                    p.grad = np.zeros_like(p.data)
            adam_step(params, lr, train_cfg)
            losses.append(float(loss.data))
            ce_sums[task].append(ce)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": float(lr)}
        for task in tasks:
            row[f"ce_{task}"] = float(np.mean(ce_sums[task]))
        history.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return model, history


# -- evaluation --------------------------------------------------------------------


def eval_solver_depth(model, examples, detokenizer, vocab, options=DecodeOptions()):
    """Mean per-image depth RMSE in normalized units against raw targets."""
    lo, hi = detokenizer.config.input_range
    errs = []
    for ex in examples:
        dm = infer(model, ex.image, "dep", options, detokenizer, vocab)
        diff = (dm.values - ex.depth.values) / (hi - lo)
        v = ex.depth.valid
        errs.append(np.sqrt(np.mean(diff[v] ** 2)))
    return float(np.mean(errs))


def eval_solver_instances(model, examples, detokenizer, vocab, options=DecodeOptions()):
    """Mean simplified AP and IoU; malformed generations count as empty output."""
    aps, ious = [], []
    for ex in examples:
        hw = ex.image.shape[-2:]
        try:
            preds = infer(model, ex.image, "ins", options, detokenizer, vocab)
        except DecodeError:
            preds = []
        m = mask_metrics([(p.class_id, p.full_mask(hw)) for p in preds], ex.gt_pairs)
        aps.append(m.ap)
        ious.append(m.mean_iou)
    return {"ap": float(np.mean(aps)), "mean_iou": float(np.mean(ious))}
