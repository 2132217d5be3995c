"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def grad_check(fn, inputs, eps=1e-5):
    """Compare analytic gradients of a scalar-valued ``fn`` against central differences.

    ``inputs`` is a sequence of Tensors; gradients are checked for every input
    with ``requires_grad``. Returns the max over coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Use float64
    inputs, central differences drown in float32 noise.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            lo = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def cast_float64(module):
    """Promote every parameter and buffer of a module tree to float64 in place.

    Modules build float32 by default, which is too coarse for central
    differences; promote small clones before checking them.
    """
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
        p.m = np.zeros_like(p.data)
        p.v = np.zeros_like(p.data)
    stack = [module]
    while stack:
        m = stack.pop()
        for name in m._buffers:
            object.__setattr__(m, name, getattr(m, name).astype(np.float64))
        stack.extend(m._modules.values())
    return module


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _primitive_cases(seed):
    rng = np.random.default_rng(seed)
    cases = []

    def case(name, fn, *inputs, eps=1e-5):
        cases.append((name, fn, list(inputs), eps))

    case("add_broadcast", lambda a, b: T.reduce_sum(T.add(a, b)),
         _t(rng, (3, 4)), _t(rng, (4,)))
    case("mul_broadcast", lambda a, b: T.reduce_sum(T.mul(a, b)),
         _t(rng, (2, 3, 4)), _t(rng, (3, 1)))
    case("power", lambda a: T.reduce_sum(T.power(a, 3)), _t(rng, (3, 3)))
    case("exp", lambda a: T.reduce_sum(T.exp(a)), _t(rng, (3, 4), 0.5))
    case("log", lambda a: T.reduce_sum(T.log(a)),
         Tensor(rng.random((3, 4)) + 0.5, requires_grad=True))
    case("sqrt", lambda a: T.reduce_sum(T.sqrt(a)),
         Tensor(rng.random((3, 4)) + 0.5, requires_grad=True))
    # keep inputs a safe distance from the kink so the FD step cannot cross it
    case("relu", lambda a: T.reduce_sum(T.relu(a)),
         Tensor(np.where(np.abs(rng.standard_normal((4, 4))) < 0.1, 0.5,
                         rng.standard_normal((4, 4))), requires_grad=True))
    case("sigmoid", lambda a: T.reduce_sum(T.sigmoid(a)), _t(rng, (3, 4), 2.0))
    case("tanh", lambda a: T.reduce_sum(T.tanh(a)), _t(rng, (3, 4)))
    case("reduce_sum_axis", lambda a: T.reduce_sum(T.mul(T.reduce_sum(a, axis=1), 2.0)),
         _t(rng, (3, 4)))
    case("reduce_mean", lambda a: T.reduce_sum(T.power(T.reduce_mean(a, axis=0), 2)),
         _t(rng, (3, 4)))
    # distinct entries with wide gaps keep argmax stable under the FD step
    case("reduce_max", lambda a: T.reduce_sum(T.reduce_max(a, axis=1)),
         Tensor(rng.permutation(12).reshape(3, 4) * 0.37, requires_grad=True))
    case("reshape_transpose",
         lambda a: T.reduce_sum(T.power(T.transpose(T.reshape(a, (2, 6)), (1, 0)), 2)),
         _t(rng, (3, 4)))
    case("concat", lambda a, b: T.reduce_sum(T.power(T.concat([a, b], axis=1), 2)),
         _t(rng, (2, 3)), _t(rng, (2, 2)))
    case("take_repeated_rows", lambda a: T.reduce_sum(T.take(a, ([0, 0, 2],))),
         _t(rng, (4, 5)))
    case("matmul_batched", lambda a, b: T.reduce_sum(T.matmul(a, b)),
         _t(rng, (2, 3, 4)), _t(rng, (2, 4, 2)))
    case("linear", lambda x, w, b: T.reduce_sum(T.linear(x, w, b)),
         _t(rng, (2, 5)), _t(rng, (3, 5)), _t(rng, (3,)))
    case("embedding_repeated_ids",
         lambda tbl: T.reduce_sum(T.power(T.embedding_lookup(tbl, np.array([[0, 2, 2], [5, 0, 1]])), 2)),
         _t(rng, (7, 3)))
    case("softmax", lambda a: T.reduce_sum(T.power(T.softmax(a, axis=-1), 2)),
         _t(rng, (3, 5)))
    case("log_softmax", lambda a: T.reduce_sum(T.mul(T.log_softmax(a, axis=-1), 0.3)),
         _t(rng, (3, 5)))
    case("attention", lambda q, k, v: T.reduce_sum(T.scaled_dot_product_attention(q, k, v)),
         _t(rng, (1, 2, 3, 4)), _t(rng, (1, 2, 3, 4)), _t(rng, (1, 2, 3, 4)))
    case("attention_causal",
         lambda q, k, v: T.reduce_sum(
             T.scaled_dot_product_attention(q, k, v, causal_mask=True)),
         _t(rng, (1, 2, 3, 4)), _t(rng, (1, 2, 3, 4)), _t(rng, (1, 2, 3, 4)))
    case("group_norm",
         lambda x, w, b: T.reduce_sum(T.power(T.group_norm(x, 2, w, b), 2)),
         _t(rng, (2, 4, 3, 3)), _t(rng, (4,)), _t(rng, (4,)))
    case("layer_norm",
         lambda x, w, b: T.reduce_sum(T.power(T.layer_norm(x, w, b), 2)),
         _t(rng, (2, 3, 5)), _t(rng, (5,)), _t(rng, (5,)))
    case("conv2d",
         lambda x, w, b: T.reduce_sum(T.power(T.conv2d(x, w, b, stride=2, padding=1), 2)),
         _t(rng, (1, 2, 5, 5)), _t(rng, (3, 2, 3, 3), 0.5), _t(rng, (3,)))
    case("reflect_pad2d",
         lambda x: T.reduce_sum(T.power(T.reflect_pad2d(x, 2), 2)),
         _t(rng, (2, 3, 4, 5)))
    case("conv_transpose2d",
         lambda x, w, b: T.reduce_sum(T.power(T.conv_transpose2d(x, w, b, stride=2, padding=1), 2)),
         _t(rng, (1, 3, 3, 3)), _t(rng, (3, 2, 4, 4), 0.5), _t(rng, (2,)))
    case("masked_cross_entropy",
         lambda lg: T.masked_cross_entropy(lg, np.array([2, 0, 4, 1]),
                                           ignore_flags=np.array([False, True, False, False])),
         _t(rng, (4, 5)))
    mse_target = rng.standard_normal((3, 4))
    mse_valid = rng.random((3, 4)) > 0.3
    case("masked_mse",
         lambda p: T.masked_mse(p, mse_target, valid=mse_valid), _t(rng, (3, 4)))
    bce_target = (rng.random((3, 4)) > 0.5).astype(np.float64)
    bce_valid = rng.random((3, 4)) > 0.3
    case("bce_with_logits",
         lambda lg: T.bce_with_logits(lg, bce_target, valid=bce_valid),
         _t(rng, (3, 4), 2.0))
    return cases


def _composed_cases(seed):
    from . import solver as S
    from .codec import EOS, TokenSequence, Vocabulary
    from .tokenizers import TokenizerConfig, build_tokenizer

    rng = np.random.default_rng(seed)
    cases = []

    tok = cast_float64(build_tokenizer(
        TokenizerConfig(n_conv_layers=2, channel_schedule=(8, 8), n_resblocks=1,
                        codebook_size=4, code_dim=4, recon_loss="bce"),
        np.random.default_rng(seed))).freeze()
    target = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)

    # hard quantization is piecewise constant, so its true derivative is zero
    # and the straight-through surrogate is intentionally different; the
    # composed tokenizer check therefore runs the smooth encoder-decoder path
    def tokenizer_recon(x):
        return T.bce_with_logits(tok.decode_latent(tok.encode(x)), target)

    cases.append(("tokenizer_encoder_decoder_bce", tokenizer_recon,
                  [Tensor(rng.random((1, 1, 8, 8)), requires_grad=True)], 1e-5))

    solver = cast_float64(S.build_solver(
        S.SolverConfig(vocab_size=12, embed_dim=8, n_heads=2, n_encoder_blocks=1,
                       n_decoder_blocks=1, patch_size=4, memory_grid=(2, 2),
                       max_seq_len=12, depth_grid=(2, 2)),
        np.random.default_rng(seed + 1)))
    seq = TokenSequence(ids=[5, 6, 7, EOS], loss_mask=[True] * 4, task="ins")

    def solver_ce(x):
        logits, targets, keep = S.teacher_forced_logits(solver, solver.encode(x), [seq])
        return T.masked_cross_entropy(T.reshape(logits, (-1, 12)), targets.reshape(-1),
                                      ignore_flags=~keep.reshape(-1))

    cases.append(("solver_teacher_forced_ce", solver_ce,
                  [_t(rng, (1, 1, 8, 8))], 1e-5))

    vocab = Vocabulary(n_classes=1, n_coord_bins=4, k_mask=4, k_depth=4)
    mask_target = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)

    # out-of-slice logits cancel in the restricted softmax, so their true
    # gradient is ~0 and a smaller step would only resolve FD noise there
    def aux_chain(lg):
        probs = S.restrict_probs(T.softmax(lg, axis=-1), vocab.mask_range)
        return T.bce_with_logits(tok.decode_soft_logits_t(probs, (2, 2)), mask_target)

    cases.append(("aux_restricted_soft_decode", aux_chain,
                  [_t(rng, (4, vocab.total))], 1e-4))
    return cases


def gradcheck_suite(seed=0):
    """Finite-difference checks over every primitive plus composed toys.

    Returns an ordered list of (case name, max relative error). Everything
    runs in float64 on tiny shapes; the whole suite is a few seconds of CPU.
    """
    results = []
    for name, fn, inputs, eps in _primitive_cases(seed) + _composed_cases(seed):
        results.append((name, grad_check(fn, inputs, eps=eps)))
    return results
