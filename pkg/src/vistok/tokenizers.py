"""Task-output VQ-VAEs: turn depth maps and instance masks into code grids.

The encoder stacks stride-2 3x3 convolutions (channel schedule rising, e.g.
16 to 256) followed by residual blocks; the decoder mirrors it with stride-2
4x4 deconvolutions and ends in a sigmoid so reconstructions live in [0, 1]
before being rescaled to the task's value range. The bottleneck is the EMA
codebook from ``vq``; training updates it by moving averages while Adam
trains the conv weights, with the reconstruction loss masked to valid pixels
(MSE for depth, binary cross-entropy for masks).

Also here: patchwise input masking for denoising-style training and the
learning-free interpolation baseline the learned tokenizers are compared to.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vq
from .nn import Conv2d, ConvTranspose2d, GroupNorm, Module, ModuleList
from .optim import TrainConfig, adam_step, zero_grads
from .resize import resize_bilinear, resize_nearest
from .tensor import DimensionError, Tensor


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries where it happened."""


@dataclass
class DepthMap:
    """Depth values in meters plus per-pixel validity; invalid pixels hold 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2:
            raise DimensionError(f"depth map must be 2d, got shape {self.values.shape}")
        if self.values.shape != self.valid.shape:
            raise DimensionError(
                f"values {self.values.shape} and valid {self.valid.shape} shapes differ"
            )
        if not np.all(np.isfinite(self.values[self.valid])):
            raise ValueError("depth map holds non-finite values on valid pixels")


@dataclass(frozen=True)
class TokenizerConfig:
    n_conv_layers: int
    channel_schedule: tuple
    n_resblocks: int = 2
    codebook_size: int = 128
    code_dim: int = 64
    width_multiplier: float = 1.0
    input_range: tuple = (0.0, 1.0)
    recon_loss: str = "mse"  # "mse" | "bce"
    commitment_beta: float = 0.25
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5

    def __post_init__(self):
        if len(self.channel_schedule) != self.n_conv_layers:
            raise ValueError(
                f"channel schedule length {len(self.channel_schedule)} != "
                f"{self.n_conv_layers} conv layers"
            )
        if self.codebook_size < 2:
            raise ValueError(f"codebook needs at least 2 codes, got {self.codebook_size}")
        if self.recon_loss not in ("mse", "bce"):
            raise ValueError(f"unknown reconstruction loss {self.recon_loss!r}")
        if self.input_range[1] <= self.input_range[0]:
            raise ValueError(f"empty input range {self.input_range}")

    @property
    def downsample_ratio(self):
        return 2**self.n_conv_layers

    @property
    def channels(self):
        """Channel schedule after the width multiplier, floored at 8."""
        return tuple(max(8, int(round(c * self.width_multiplier))) for c in self.channel_schedule)


def depth_default_config(**overrides):
    """Five stride-2 layers: 32x downsample, codes sized for [0, 10] m depth."""
    base = dict(
        n_conv_layers=5,
        channel_schedule=(16, 32, 64, 128, 256),
        input_range=(0.0, 10.0),
        recon_loss="mse",
    )
    base.update(overrides)
    return TokenizerConfig(**base)


def mask_default_config(**overrides):
    """Four stride-2 layers: 64x64 binary crops become 4x4 token grids."""
    base = dict(
        n_conv_layers=4,
        channel_schedule=(16, 32, 64, 128),
        input_range=(0.0, 1.0),
        recon_loss="bce",
    )
    base.update(overrides)
    return TokenizerConfig(**base)


@dataclass(frozen=True)
class MaskAugSpec:
    mask_ratio: float
    patch_size: int = 16
    fill_value: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.patch_size < 1:
            raise ValueError(f"patch size must be positive, got {self.patch_size}")


def _norm(channels):
    return GroupNorm(math.gcd(8, channels), channels)


class ResBlock(Module):
    """conv3x3 -> norm -> relu -> conv3x3 -> norm, added to the input.

    With ``reflect=True`` the convolutions mirror-pad instead of zero-pad, so
    a spatially constant input stays constant and carries no position cue.
    """

    def __init__(self, channels, hidden, rng, reflect=False):
        super().__init__()
        self.reflect = reflect
        pad = 0 if reflect else 1
        self.conv1 = Conv2d(channels, hidden, 3, rng, padding=pad)
        self.norm1 = _norm(hidden)
        self.conv2 = Conv2d(hidden, channels, 3, rng, padding=pad)
        self.norm2 = _norm(channels)

    def _pad(self, x):
        return T.reflect_pad2d(x, 1) if self.reflect else x

    def forward(self, x):
        h = T.relu(self.norm1(self.conv1(self._pad(x))))
        return T.add(x, self.norm2(self.conv2(self._pad(h))))


class TokenizerModel(Module):
    """Encoder, EMA codebook, decoder; built by ``build_tokenizer``."""

    def __init__(self, config: TokenizerConfig, rng):
        super().__init__()
        self.config = config
        chans = config.channels
        hidden = max(8, chans[-1] // 2)

        # the encoder mirror-pads: tokens must describe patch content, and a
        # zero border would let every position imprint itself on the latent,
        # which then dominates codebook assignment on flat regions; the
        # down/up stacks carry no normalization so the reconstruction
        # gradient reaches the latent at full scale and can hold its own
        # against the commitment pull
        enc = []
        prev = 1
        for c in chans:
            enc.append(Conv2d(prev, c, 3, rng, stride=2, padding=0))
            prev = c
        self.encoder = ModuleList(enc)
        self.enc_res = ModuleList(
            [ResBlock(prev, hidden, rng, reflect=True) for _ in range(config.n_resblocks)]
        )
        self.to_code = Conv2d(prev, config.code_dim, 1, rng)
        self.codebook = vq.Codebook(
            config.codebook_size, config.code_dim, rng,
            decay=config.ema_decay, epsilon=config.ema_epsilon,
        )
        self.from_code = Conv2d(config.code_dim, prev, 1, rng)
        self.dec_res = ModuleList([ResBlock(prev, hidden, rng) for _ in range(config.n_resblocks)])
        dec = []
        for c in reversed(chans[:-1]):
            dec.append(ConvTranspose2d(prev, c, 4, rng, stride=2, padding=1))
            prev = c
        self.decoder = ModuleList(dec)
        self.to_output = ConvTranspose2d(prev, 1, 4, rng, stride=2, padding=1)

    # -- tensor-level passes used by training ------------------------------
    def encode(self, x: Tensor) -> Tensor:
        """[B,1,H,W] in [0,1] -> latent [B, code_dim, h, w].

        Each spatial position's code vector is scaled to unit RMS, so the
        whole latent cloud lives on a fixed-radius shell. Without this the
        encoder is free to shrink or inflate the cloud relative to the
        codebook's quantization cells, and either direction starves the
        codebook: codes stop flipping and usage freezes.
        """
        h = x
        for conv in self.encoder:
            h = T.relu(conv(T.reflect_pad2d(h, 1)))
        for block in self.enc_res:
            h = block(h)
        z = self.to_code(h)
        ms = T.reduce_mean(T.power(z, 2), axis=1, keepdims=True)
        return T.mul(z, T.power(T.add(ms, 1e-6), -0.5))

    def decode_latent(self, z_q: Tensor) -> Tensor:
        """Latent [B, code_dim, h, w] -> output logits [B,1,H,W] (pre-sigmoid)."""
        h = self.from_code(z_q)
        for block in self.dec_res:
            h = block(h)
        for deconv in self.decoder:
            h = T.relu(deconv(h))
        return self.to_output(h)

    def quantize_latent(self, z: Tensor):
        """Flatten to rows, snap to codes, route gradients straight through.

        Returns (straight-through latent [B,D,h,w], flat rows Tensor,
        flat quantized rows ndarray, indices [B,h,w]).
        """
        b, d, gh, gw = z.shape
        rows = T.reshape(T.transpose(z, (0, 2, 3, 1)), (b * gh * gw, d))
        indices, z_q = vq.quantize_hard(rows, self.codebook)
        st = vq.straight_through(rows, z_q)
        st = T.transpose(T.reshape(st, (b, gh, gw, d)), (0, 3, 1, 2))
        return st, rows, z_q, indices.reshape(b, gh, gw)

    # -- numpy-level conveniences -------------------------------------------
    def _normalize(self, values):
        lo, hi = self.config.input_range
        x = (np.asarray(values, dtype=np.float32) - lo) / (hi - lo)
        return np.clip(x, 0.0, 1.0)

    def _denormalize(self, x01):
        lo, hi = self.config.input_range
        return x01 * (hi - lo) + lo

    def tokenize(self, values) -> np.ndarray:
        """One map/mask [H,W] (or DepthMap) -> int token grid [h, w]."""
        if isinstance(values, DepthMap):
            values = values.values
        values = np.asarray(values)
        if values.ndim != 2:
            raise DimensionError(f"tokenize expects a 2d input, got shape {values.shape}")
        ratio = self.config.downsample_ratio
        if values.shape[0] % ratio or values.shape[1] % ratio:
            raise DimensionError(
                f"input {values.shape} not divisible by downsample ratio {ratio}"
            )
        x = Tensor(self._normalize(values)[None, None])
        with T.no_grad():
            z = self.encode(x)
            _, _, _, indices = self.quantize_latent(z)
        return indices[0]

    def detokenize(self, tokens) -> np.ndarray:
        """Int token grid [h, w] -> reconstruction [H, W] in input_range units."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"detokenize expects a 2d grid, got shape {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.config.codebook_size:
            raise IndexError(
                f"token {int(tokens.max())} outside codebook of {self.config.codebook_size}"
            )
        onehot = np.zeros((tokens.size, self.config.codebook_size), dtype=np.float32)
        onehot[np.arange(tokens.size), tokens.reshape(-1)] = 1.0
        return self.detokenize_soft(onehot.reshape(*tokens.shape, -1))

    def detokenize_soft(self, probs) -> np.ndarray:
        """Soft token grid [h, w, K] -> reconstruction [H, W]; hard == one-hot soft."""
        probs = np.asarray(probs, dtype=np.float32)
        if probs.ndim != 3 or probs.shape[-1] != self.config.codebook_size:
            raise DimensionError(
                f"expected [h, w, {self.config.codebook_size}] probabilities, "
                f"got shape {probs.shape}"
            )
        gh, gw, k = probs.shape
        with T.no_grad():
            out = self.decode_soft_t(Tensor(probs.reshape(gh * gw, k)), (gh, gw))
        return self._denormalize(out.data[0, 0])

    def decode_soft_logits_t(self, probs: Tensor, grid_hw) -> Tensor:
        """Differentiable soft decode to pre-sigmoid logits [1,1,H,W]."""
        gh, gw = grid_hw
        z = vq.embed_soft(probs, self.codebook)
        z = T.transpose(T.reshape(z, (1, gh, gw, self.config.code_dim)), (0, 3, 1, 2))
        return self.decode_latent(z)

    def decode_soft_t(self, probs: Tensor, grid_hw) -> Tensor:
        """Differentiable soft decode: [n, K] probabilities -> [1,1,H,W] in [0,1]."""
        return T.sigmoid(self.decode_soft_logits_t(probs, grid_hw))


def build_tokenizer(config: TokenizerConfig, rng) -> TokenizerModel:
    return TokenizerModel(config, rng)


# -- input corruption ----------------------------------------------------------


def mask_augment(values, spec: MaskAugSpec, rng, valid=None):
    """Blank out exactly round(ratio * n_patches) patches of the input.

    Returns (corrupted, target, loss_mask): the supervision target is the
    untouched original and the loss mask is the original validity, so the
    model is trained to restore what it no longer sees.
    """
    values = np.asarray(values, dtype=np.float32)
    h, w = values.shape[-2:]
    ps = spec.patch_size
    if h % ps or w % ps:
        raise DimensionError(f"patch size {ps} does not divide input {values.shape}")
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    corrupted = values.copy()
    n_patches = (h // ps) * (w // ps)
    n_fill = int(round(spec.mask_ratio * n_patches))
    flat = corrupted.reshape(-1, h, w)
    for b in range(flat.shape[0]):
        chosen = rng.choice(n_patches, size=n_fill, replace=False)
        for p in chosen:
            r, c = divmod(int(p), w // ps)
            flat[b, r * ps : (r + 1) * ps, c * ps : (c + 1) * ps] = spec.fill_value
    return corrupted.reshape(values.shape), values.copy(), valid.copy()


# -- training -------------------------------------------------------------------


def _init_codebook_from_data(model: TokenizerModel, values, valid, rng):
    """Seed codebook rows with spread-out untrained encoder outputs.

    Random rows start far from the encoder's output cloud, so only a handful
    ever win an assignment and the EMA update can never revive the rest.
    Rows are picked from actual encoder outputs by farthest-point traversal:
    uniform sampling would mostly land on the dominant flat-background
    vector, and exact duplicates lose every argmin tie-break, which kills
    them just as dead as far-away random rows. Seed-deterministic; called at
    build time and again when a warmup phase hands off to quantization.
    """
    lo, hi = model.config.input_range
    take = min(values.shape[0], 64)
    clean = np.where(valid[:take], values[:take], np.float32(0.0))
    x01 = np.clip((clean - lo) / (hi - lo), 0.0, 1.0)[:, None]
    with T.no_grad():
        z = model.encode(Tensor(x01.astype(np.float32)))
    flat = z.data.transpose(0, 2, 3, 1).reshape(-1, model.config.code_dim)
    k = model.codebook.n_codes
    chosen = [int(rng.integers(flat.shape[0]))]
    dist = ((flat - flat[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < min(k, flat.shape[0]):
        nxt = int(dist.argmax())
        if dist[nxt] == 0.0:
            break  # every remaining output duplicates a chosen row
        chosen.append(nxt)
        dist = np.minimum(dist, ((flat - flat[nxt]) ** 2).sum(axis=1))
    rows = flat[chosen]
    if rows.shape[0] < k:
        # fewer distinct outputs than codes: fill with jittered repeats
        extra = rows[rng.integers(rows.shape[0], size=k - rows.shape[0])]
        extra = extra + rng.standard_normal(extra.shape).astype(flat.dtype) * (
            0.01 * max(float(flat.std()), 1e-3)
        )
        rows = np.concatenate([rows, extra], axis=0)
    model.codebook.embeddings[...] = rows.astype(model.codebook.embeddings.dtype)
    # restart the moving averages at (sum, size) = (embedding, 1) so the
    # smoothed-average identity holds immediately; on a mid-training re-seed
    # this also clears stale counts that would otherwise crush the new rows
    model.codebook.ema_sum[...] = model.codebook.embeddings.copy()
    model.codebook.ema_size[...] = 1.0


def _batch_metric(config, recon01, target01, valid):
    if config.recon_loss == "bce":
        pred = recon01 >= 0.5
        gt = target01 >= 0.5
        inter = np.logical_and(pred, gt).sum(axis=(1, 2, 3))
        union = np.logical_or(pred, gt).sum(axis=(1, 2, 3))
        return float(np.mean(np.where(union > 0, inter / np.maximum(union, 1), 1.0)))
    err = (recon01 - target01) ** 2 * valid
    denom = max(int(valid.sum()), 1)
    return float(np.sqrt(err.sum() / denom))


def train_tokenizer(dataset, config: TokenizerConfig, train_cfg: TrainConfig,
                    aug: MaskAugSpec = None, log_path=None, model: TokenizerModel = None,
                    start_epoch=0, warmup_epochs=0):
    """Fit a tokenizer on (values [N,H,W], valid [N,H,W]) arrays.

    Loss is the masked reconstruction term plus the commitment term; the
    codebook itself learns through EMA updates, not gradients. History rows
    {epoch, loss, recon_metric, lr} are returned and optionally appended to
    ``log_path`` as JSONL. Bit-deterministic for a fixed seed because every
    epoch draws from a (seed, epoch)-derived stream, which also lets a
    restored checkpoint resume at ``start_epoch`` as if it never stopped.

    For the first ``warmup_epochs`` epochs the decoder reads the smooth
    latent instead of the quantized one (commitment and EMA stay live), and
    at the boundary the codebook is re-seeded from the now-trained encoder's
    outputs. An untrained encoder's output cloud barely spreads, so codes
    picked from it start almost coincident and assignments never move;
    seeding from a content-rich cloud spreads usage across the book.
    """
    values, valid = dataset
    values = np.asarray(values, dtype=np.float32)
    valid = np.asarray(valid, dtype=bool)
    if values.ndim != 3 or values.shape[0] == 0:
        raise ValueError(f"dataset must be a nonempty [N,H,W] stack, got {values.shape}")
    if not 0 <= start_epoch <= train_cfg.epochs:
        raise ValueError(f"start epoch {start_epoch} outside [0, {train_cfg.epochs}]")
    if warmup_epochs < 0:
        raise ValueError(f"warmup epochs must be nonnegative, got {warmup_epochs}")
    if model is None:
        model = build_tokenizer(config, np.random.default_rng(train_cfg.seed))
        _init_codebook_from_data(model, values, valid,
                                 np.random.default_rng((train_cfg.seed, 1)))
    params = list(model.parameters())
    lo, hi = config.input_range
    history = []
    for epoch in range(start_epoch, train_cfg.epochs):
        if epoch == warmup_epochs and epoch > 0:
            _init_codebook_from_data(model, values, valid,
                                     np.random.default_rng((train_cfg.seed, 2)))
        rng = np.random.default_rng((train_cfg.seed, epoch))
        order = rng.permutation(values.shape[0])
        lr = train_cfg.lr_at(epoch)
        losses, metrics = [], []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch_valid = valid[idx]
            # invalid pixels carry the 0 sentinel into the batch, whatever the
            # array held there, so they can steer neither inputs nor loss
            target = np.where(batch_valid, values[idx], np.float32(0.0))
            if aug is not None and aug.mask_ratio > 0:
                inputs, target, batch_valid = mask_augment(target, aug, rng, batch_valid)
            else:
                inputs = target
            x01 = np.clip((inputs - lo) / (hi - lo), 0.0, 1.0)[:, None]
            t01 = np.clip((target - lo) / (hi - lo), 0.0, 1.0)[:, None]
            v = batch_valid[:, None]

            z = model.encode(Tensor(x01))
            st, rows, z_q, _indices = model.quantize_latent(z)
            logits = model.decode_latent(z if epoch < warmup_epochs else st)
            if config.recon_loss == "bce":
                recon_loss = T.bce_with_logits(logits, t01, valid=v)
                recon01 = 1.0 / (1.0 + np.exp(-logits.data))
            else:
                recon01_t = T.sigmoid(logits)
                recon_loss = T.masked_mse(recon01_t, t01, valid=v)
                recon01 = recon01_t.data
            loss = T.add(recon_loss, vq.vq_losses(rows, z_q, config.commitment_beta))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, sample offset {start}"
                )
            zero_grads(params)
            loss.backward()
            adam_step(params, lr, train_cfg)
            vq.ema_update(model.codebook, rows.data, _indices.reshape(-1))
            losses.append(float(loss.data))
            metrics.append(_batch_metric(config, recon01, t01, v))
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "recon_metric": float(np.mean(metrics)),
            "lr": float(lr),
        }
        history.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return model, history


def eval_tokenizer_rmse(model: TokenizerModel, values, valid=None):
    """Mean tokenize-detokenize RMSE in normalized [0,1] units over a stack."""
    values = np.asarray(values, dtype=np.float32)
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    lo, hi = model.config.input_range
    errs = []
    for i in range(values.shape[0]):
        recon = model.detokenize(model.tokenize(values[i]))
        diff = (recon - values[i]) / (hi - lo)
        v = valid[i]
        errs.append(np.sqrt(np.sum(diff[v] ** 2) / max(v.sum(), 1)))
    return float(np.mean(errs))


def eval_tokenizer_iou(model: TokenizerModel, masks):
    """Mean roundtrip IoU of binary masks through the tokenizer."""
    ious = []
    for i in range(np.asarray(masks).shape[0]):
        gt = np.asarray(masks[i]) >= 0.5
        recon = model.detokenize(model.tokenize(np.asarray(masks[i], dtype=np.float32))) >= 0.5
        union = np.logical_or(recon, gt).sum()
        inter = np.logical_and(recon, gt).sum()
        ious.append(inter / union if union else 1.0)
    return float(np.mean(ious))


# -- learning-free baseline ------------------------------------------------------


def interpolation_tokenize(values, downsample_ratio, mode="bilinear", n_bins=None,
                           value_range=(0.0, 1.0)):
    """Down-resample and (for depth) bin; the baseline has nothing to learn."""
    if n_bins is not None and n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    values = np.asarray(values, dtype=np.float32)
    h, w = values.shape[-2:]
    out_hw = (h // downsample_ratio, w // downsample_ratio)
    small = resize_nearest(values, out_hw) if mode == "nearest" else resize_bilinear(values, out_hw)
    if n_bins is None:
        return (small >= 0.5).astype(np.int64)
    lo, hi = value_range
    scaled = np.clip((small - lo) / (hi - lo), 0.0, 1.0)
    return np.minimum((scaled * n_bins).astype(np.int64), n_bins - 1)


def interpolation_detokenize(grid, downsample_ratio, mode="bilinear", n_bins=None,
                             value_range=(0.0, 1.0)):
    grid = np.asarray(grid)
    out_hw = (grid.shape[-2] * downsample_ratio, grid.shape[-1] * downsample_ratio)
    if n_bins is None:
        values = grid.astype(np.float32)
    else:
        if n_bins < 2:
            raise ValueError(f"need at least 2 bins, got {n_bins}")
        lo, hi = value_range
        values = ((grid + 0.5) / n_bins * (hi - lo) + lo).astype(np.float32)
    up = resize_nearest(values, out_hw) if mode == "nearest" else resize_bilinear(values, out_hw)
    return (up >= 0.5).astype(np.float32) if n_bins is None else up
