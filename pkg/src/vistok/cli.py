"""Command-line pipeline: scene generation, training, evaluation, invariant suites.

Every command that writes artifacts also drops a ``manifest.json`` next to
them recording the resolved configuration, the content hashes of its inputs,
and the hashes of what it produced, so a run can be audited or replayed from
the manifest alone. File writes go through temp-then-rename. Configuration
precedence is flags over config file over built-in defaults.

Exit codes: 0 success, 1 operational error (bad flags, missing or
incompatible files), 2 invariant violation or training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import solver as S
from .codec import (
    DecodeError,
    Vocabulary,
    build_instance_sequence,
    decode_depth,
    dequantize_box,
    encode_depth,
    parse_instance_sequence,
    quantize_box,
)
from .gradcheck import gradcheck_suite
from .metrics import depth_metrics
from .optim import TrainConfig
from .serialize import (
    FormatError,
    _atomic_write,
    load_checkpoint,
    save_checkpoint,
    save_pgm,
)
from .synthetic import SceneSpec, SyntheticScene, gen_dataset
from .tensor import DimensionError
from .tokenizers import (
    DepthMap,
    MaskAugSpec,
    TokenizerConfig,
    TrainingDiverged,
    build_tokenizer,
    depth_default_config,
    interpolation_detokenize,
    interpolation_tokenize,
    mask_default_config,
    train_tokenizer,
)
from .vq import Codebook, embed_soft, ema_update, quantize_hard

EXIT_OK = 0
EXIT_OPERATIONAL = 1
EXIT_INVARIANT = 2

SCENES_FILE = "scenes.bin"
MANIFEST_FILE = "manifest.json"
DATA_ROOT_ENV = "VISTOK_DATA_ROOT"
GRADCHECK_THRESHOLD = 1e-4


class CliError(Exception):
    """Operational failure: bad arguments, missing or incompatible artifacts."""


class InvariantFailure(Exception):
    """A checked invariant did not hold."""


class _UsageError(Exception):
    pass


# -- hashing and manifests -----------------------------------------------------


def _sha256_file(path):
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise CliError(f"cannot hash {path}: {exc}") from exc
    return "sha256:" + h.hexdigest()


def _write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n")


@dataclasses.dataclass
class RunManifest:
    """What a command did: resolved config, input hashes, produced artifacts."""

    command: str
    config: dict
    seed: int
    inputs: dict  # path -> content hash
    outputs: list  # paths relative to the manifest's directory
    output_hashes: dict  # relative path -> content hash
    argv: list  # the command line as given, for replay

    def write(self, path):
        _write_json(path, dataclasses.asdict(self))

    @staticmethod
    def read(path):
        try:
            with open(path) as fh:
                return json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read manifest {path}: {exc}") from exc


def _scan_outputs(out_dir):
    """Relative paths and hashes of every artifact under out_dir, manifest excluded."""
    outputs, hashes = [], {}
    for root, _dirs, files in os.walk(out_dir):
        for name in sorted(files):
            rel = os.path.relpath(os.path.join(root, name), out_dir)
            if rel == MANIFEST_FILE:
                continue
            outputs.append(rel)
            hashes[rel] = _sha256_file(os.path.join(root, name))
    outputs.sort()
    return outputs, dict(sorted(hashes.items()))


def _finish_run(out_dir, command, config, seed, inputs, argv):
    outputs, hashes = _scan_outputs(out_dir)
    manifest = RunManifest(command=command, config=config, seed=int(seed),
                           inputs=dict(sorted(inputs.items())), outputs=outputs,
                           output_hashes=hashes, argv=list(argv))
    manifest.write(os.path.join(out_dir, MANIFEST_FILE))
    return manifest


# -- scene storage ---------------------------------------------------------------


def save_scenes(path, scenes):
    meta = {"kind": "scenes", "n": len(scenes)}
    tensors = []
    for i, s in enumerate(scenes):
        pre = f"s{i}."
        boxes = np.array([inst.box for inst in s.instances], dtype=np.float32)
        tensors += [
            (pre + "image", s.image.astype(np.float32)),
            (pre + "depth", s.depth.values.astype(np.float32)),
            (pre + "dvalid", s.depth.valid.astype(np.uint8)),
            (pre + "boxes", boxes.reshape(-1, 4)),
            (pre + "classes", np.array([inst.class_id for inst in s.instances],
                                       dtype=np.int32)),
            (pre + "crops", np.stack([inst.mask64 for inst in s.instances]).astype(np.uint8)
             if s.instances else np.zeros((0, 64, 64), dtype=np.uint8)),
            (pre + "fulls", np.stack(s.masks).astype(np.uint8)
             if s.masks else np.zeros((0,) + s.image.shape[-2:], dtype=np.uint8)),
        ]
    save_checkpoint(path, meta, tensors)


def load_scenes(path):
    from .codec import InstanceAnnotation

    if not os.path.exists(path):
        raise CliError(f"scene file {path} does not exist; run gen-data first")
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "scenes":
        raise CliError(f"{path}: not a scene file (kind={meta.get('kind')!r})")
    scenes = []
    for i in range(int(meta["n"])):
        pre = f"s{i}."
        try:
            image = tensors[pre + "image"]
            depth = DepthMap(values=tensors[pre + "depth"],
                             valid=tensors[pre + "dvalid"].astype(bool))
            boxes = tensors[pre + "boxes"]
            classes = tensors[pre + "classes"]
            crops = tensors[pre + "crops"]
            fulls = tensors[pre + "fulls"]
        except KeyError as exc:
            raise CliError(f"{path}: scene {i} is missing tensor {exc}") from exc
        instances = [
            InstanceAnnotation(box=tuple(float(x) for x in boxes[j]),
                               class_id=int(classes[j]), mask64=crops[j].astype(bool))
            for j in range(len(classes))
        ]
        masks = [fulls[j].astype(bool) for j in range(len(classes))]
        scenes.append(SyntheticScene(image=image, depth=depth,
                                     instances=instances, masks=masks))
    return scenes


# -- model checkpoints -------------------------------------------------------------


def _model_tensors(model):
    """Parameters, buffers, and Adam moments, in stable registration order."""
    records = [("state." + name, arr) for name, arr in model.named_state()]
    steps = []
    for name, p in model.named_parameters():
        records.append(("adam.m." + name, p.m))
        records.append(("adam.v." + name, p.v))
        steps.append(p.step)
    records.append(("adam.step", np.array(steps, dtype=np.int32)))
    return records


def _restore_model(model, tensors):
    state = {k[len("state."):]: v for k, v in tensors.items() if k.startswith("state.")}
    model.load_state(state)
    steps = tensors.get("adam.step")
    for i, (name, p) in enumerate(model.named_parameters()):
        if "adam.m." + name in tensors:
            p.m = np.asarray(tensors["adam.m." + name], dtype=p.data.dtype).reshape(p.data.shape)
            p.v = np.asarray(tensors["adam.v." + name], dtype=p.data.dtype).reshape(p.data.shape)
            p.step = int(steps[i]) if steps is not None else 0


def _tokenizer_config(d):
    d = dict(d)
    for key in ("channel_schedule", "input_range"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return TokenizerConfig(**d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad tokenizer config: {exc}") from exc


def _train_config(d):
    d = dict(d)
    if "milestones" in d:
        d["milestones"] = tuple(d["milestones"])
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training config: {exc}") from exc


def _solver_config(d):
    d = dict(d)
    for key in ("memory_grid", "depth_grid"):
        if key in d:
            d[key] = tuple(d[key])
    if "task_tokens" in d:
        d["task_tokens"] = tuple((str(t), int(i)) for t, i in d["task_tokens"])
    try:
        return S.SolverConfig(**d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad solver config: {exc}") from exc


def _loss_config(d):
    d = dict(d)
    if "token_loss_weights" in d:
        d["token_loss_weights"] = tuple((str(t), float(w)) for t, w in d["token_loss_weights"])
    try:
        return S.LossConfig(**d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad loss config: {exc}") from exc


def save_tokenizer_checkpoint(path, model, task, train_cfg, aug, epochs_done,
                              warmup_epochs=0):
    meta = {
        "kind": "tokenizer",
        "task": task,
        "config": dataclasses.asdict(model.config),
        "train": dataclasses.asdict(train_cfg),
        "aug": dataclasses.asdict(aug) if aug is not None else None,
        "epochs_done": int(epochs_done),
        "warmup_epochs": int(warmup_epochs),
    }
    save_checkpoint(path, meta, _model_tensors(model))


def load_tokenizer_checkpoint(path):
    if not os.path.exists(path):
        raise CliError(f"tokenizer checkpoint {path} does not exist")
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "tokenizer":
        raise CliError(f"{path}: not a tokenizer checkpoint (kind={meta.get('kind')!r})")
    model = build_tokenizer(_tokenizer_config(meta["config"]), np.random.default_rng(0))
    _restore_model(model, tensors)
    return model, meta


def save_solver_checkpoint(path, model, vocab, tasks, tokenizer_refs, train_cfg,
                           loss_cfg, epochs_done, n_noise):
    meta = {
        "kind": "solver",
        "config": dataclasses.asdict(model.config),
        "vocab": vocab.layout(),
        "tasks": list(tasks),
        "tokenizers": tokenizer_refs,
        "train": dataclasses.asdict(train_cfg),
        "loss": dataclasses.asdict(loss_cfg),
        "epochs_done": int(epochs_done),
        "n_noise": int(n_noise),
    }
    save_checkpoint(path, meta, _model_tensors(model))


def load_solver_checkpoint(path):
    if not os.path.exists(path):
        raise CliError(f"solver checkpoint {path} does not exist")
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "solver":
        raise CliError(f"{path}: not a solver checkpoint (kind={meta.get('kind')!r})")
    model = S.build_solver(_solver_config(meta["config"]), np.random.default_rng(0))
    _restore_model(model, tensors)
    return model, meta


def _layout_diff(expected, actual):
    lines = []
    for key in sorted(set(expected) | set(actual)):
        a, b = expected.get(key), actual.get(key)
        if a != b:
            lines.append(f"  {key}: checkpoint {a}, requested {b}")
    return lines


# -- shared command helpers -------------------------------------------------------


def _data_root(flag_value):
    root = flag_value or os.environ.get(DATA_ROOT_ENV) or "data"
    if not os.path.isdir(root):
        raise CliError(
            f"data directory {root!r} does not exist (pass --data or set {DATA_ROOT_ENV})"
        )
    return root


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return obj


def _merge(base, *layers):
    """Later layers win; None values never override."""
    out = dict(base)
    for layer in layers:
        for k, v in layer.items():
            if v is not None:
                out[k] = v
    return out


def _parse_pair(text, flag):
    try:
        lo, hi = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise CliError(f"{flag} wants 'min,max', got {text!r}") from exc
    return (lo, hi)


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


def _auto_channels(n_layers):
    return tuple(min(16 * 2**i, 256) for i in range(n_layers))


def _tokenizer_dataset(scenes, task):
    if task == "depth":
        values = np.stack([s.depth.values for s in scenes])
        valid = np.stack([s.depth.valid for s in scenes])
    else:
        crops = [inst.mask64.astype(np.float32) for s in scenes for inst in s.instances]
        if not crops:
            raise CliError("no instance masks in the data; cannot train a mask tokenizer")
        values = np.stack(crops)
        valid = np.ones_like(values, dtype=bool)
    return values, valid


def _parse_tokenizer_flags(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--tokenizer wants task=path, got {pair!r}")
        task, path = pair.split("=", 1)
        if task not in ("dep", "ins"):
            raise CliError(f"--tokenizer task must be dep or ins, got {task!r}")
        out[task] = path
    return out


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args):
    spec_file = _load_config_file(args.spec)
    defaults = {f.name: f.default for f in dataclasses.fields(SceneSpec)}
    flags = {"image_size": args.image_size, "seed": args.seed,
             "n_objects": _parse_pair(args.objects, "--objects") if args.objects else None}
    resolved = _merge(defaults, spec_file, flags)
    for key in ("n_objects", "depth_range"):
        resolved[key] = tuple(resolved[key])
    try:
        spec = SceneSpec(**resolved)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad scene spec: {exc}") from exc
    if args.n < 0:
        raise CliError(f"--n must be nonnegative, got {args.n}")

    scenes = gen_dataset(spec, args.n)
    os.makedirs(args.out, exist_ok=True)
    if scenes:  # --n 0 leaves a manifest-only directory
        save_scenes(os.path.join(args.out, SCENES_FILE), scenes)
    if args.previews > 0 and scenes:
        pdir = os.path.join(args.out, "previews")
        os.makedirs(pdir, exist_ok=True)
        for i, s in enumerate(scenes[: args.previews]):
            save_pgm(os.path.join(pdir, f"scene{i}_image.pgm"), s.image[0], max_val=1.0)
            save_pgm(os.path.join(pdir, f"scene{i}_depth.pgm"), s.depth.values,
                     max_val=spec.background_depth)

    config = {"spec": {k: list(v) if isinstance(v, tuple) else v for k, v in resolved.items()},
              "n": args.n, "previews": args.previews, "out": args.out}
    inputs = {args.spec: _sha256_file(args.spec)} if args.spec else {}
    manifest = _finish_run(args.out, "gen-data", config, spec.seed, inputs, args.argv)
    _emit({"command": "gen-data", "n": args.n, "out": args.out,
           "scenes": manifest.output_hashes.get(SCENES_FILE)})
    return EXIT_OK


def cmd_train_tokenizer(args):
    data_root = _data_root(args.data)
    scenes_path = os.path.join(data_root, SCENES_FILE)
    scenes = load_scenes(scenes_path)
    values, valid = _tokenizer_dataset(scenes, args.task)
    cfg_file = _load_config_file(args.config)

    model, start_epoch = None, 0
    inputs = {scenes_path: _sha256_file(scenes_path)}
    if args.config:
        inputs[args.config] = _sha256_file(args.config)

    if args.resume:
        # the checkpoint owns the model/augmentation/seed/schedule; flags may
        # extend epochs
        model, meta = load_tokenizer_checkpoint(args.resume)
        if meta["task"] != args.task:
            raise CliError(f"checkpoint trained for task {meta['task']!r}, not {args.task!r}")
        tok_cfg = model.config
        train_cfg = _train_config(_merge(meta["train"], {"epochs": args.epochs}))
        aug = MaskAugSpec(**meta["aug"]) if meta.get("aug") else None
        start_epoch = int(meta["epochs_done"])
        warmup = int(meta.get("warmup_epochs", 0))
        inputs[args.resume] = _sha256_file(args.resume)
    else:
        base = depth_default_config() if args.task == "depth" else mask_default_config()
        flag_cfg = {"codebook_size": args.codebook_size, "code_dim": args.code_dim}
        if args.layers is not None:
            flag_cfg["n_conv_layers"] = args.layers
            flag_cfg["channel_schedule"] = _auto_channels(args.layers)
        tok_cfg = _tokenizer_config(
            _merge(dataclasses.asdict(base), cfg_file.get("tokenizer", {}), flag_cfg))
        train_cfg = _train_config(
            _merge(dataclasses.asdict(TrainConfig()), cfg_file.get("train", {}),
                   {"epochs": args.epochs, "batch_size": args.batch_size,
                    "lr": args.lr, "seed": args.seed}))
        aug = (MaskAugSpec(mask_ratio=args.mask_ratio, patch_size=args.patch_size)
               if args.mask_ratio > 0 else None)
        warmup = (args.warmup_epochs if args.warmup_epochs is not None
                  else int(cfg_file.get("warmup_epochs", 0)))

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.jsonl")
    model, history = train_tokenizer((values, valid), tok_cfg, train_cfg, aug=aug,
                                     log_path=log_path, model=model,
                                     start_epoch=start_epoch, warmup_epochs=warmup)
    ckpt = os.path.join(args.out, "tokenizer.ckpt")
    save_tokenizer_checkpoint(ckpt, model, args.task, train_cfg, aug, train_cfg.epochs,
                              warmup_epochs=warmup)

    config = {"task": args.task, "tokenizer": dataclasses.asdict(tok_cfg),
              "train": dataclasses.asdict(train_cfg),
              "aug": dataclasses.asdict(aug) if aug else None,
              "warmup_epochs": warmup,
              "data": data_root, "out": args.out, "resume": args.resume,
              "start_epoch": start_epoch}
    _finish_run(args.out, "train-tokenizer", config, train_cfg.seed, inputs, args.argv)
    _emit({"command": "train-tokenizer", "task": args.task, "out": args.out,
           "epochs": train_cfg.epochs, "n_samples": int(values.shape[0]),
           "final": history[-1] if history else None})
    return EXIT_OK


def _load_frozen_tokenizers(paths):
    models, refs = {}, {}
    for task, path in paths.items():
        model, meta = load_tokenizer_checkpoint(path)
        models[task] = model.freeze()
        refs[task] = {"path": os.path.abspath(path), "sha256": _sha256_file(path)}
    return models, refs


def cmd_train_solver(args):
    data_root = _data_root(args.data)
    scenes_path = os.path.join(data_root, SCENES_FILE)
    scenes = load_scenes(scenes_path)
    if not scenes:
        raise CliError(f"{scenes_path} holds no scenes")
    tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    for task in tasks:
        if task not in ("dep", "ins"):
            raise CliError(f"unknown task {task!r}; expected dep or ins")
    tokenizers, tok_refs = _load_frozen_tokenizers(_parse_tokenizer_flags(args.tokenizer))
    for task in tasks:
        if task not in tokenizers:
            raise CliError(f"task {task!r} needs --tokenizer {task}=<checkpoint>")
    cfg_file = _load_config_file(args.config)

    inputs = {scenes_path: _sha256_file(scenes_path)}
    inputs.update({ref["path"]: ref["sha256"] for ref in tok_refs.values()})
    if args.config:
        inputs[args.config] = _sha256_file(args.config)

    h, w = scenes[0].image.shape[-2:]
    k_mask = tokenizers["ins"].config.codebook_size if "ins" in tokenizers else 128
    k_depth = tokenizers["dep"].config.codebook_size if "dep" in tokenizers else 128
    vocab = Vocabulary(n_classes=args.classes, n_coord_bins=args.coord_bins,
                       k_mask=k_mask, k_depth=k_depth)

    if args.resume:
        model, meta = load_solver_checkpoint(args.resume)
        diff = _layout_diff(meta["vocab"], vocab.layout())
        if diff:
            raise CliError(
                "vocabulary mismatch between solver checkpoint and tokenizers:\n"
                + "\n".join(diff))
        solver_cfg = model.config
        train_cfg = _train_config(_merge(meta["train"], {"epochs": args.epochs}))
        loss_cfg = _loss_config(meta["loss"])
        tasks = tuple(meta["tasks"])
        start_epoch = int(meta["epochs_done"])
        n_noise = int(meta["n_noise"])
        inputs[args.resume] = _sha256_file(args.resume)
        dataset = S.build_solver_dataset(scenes, tokenizers, vocab, tasks=tasks,
                                         n_noise=n_noise, seed=train_cfg.seed)
    else:
        train_cfg = _train_config(
            _merge(dataclasses.asdict(TrainConfig()), cfg_file.get("train", {}),
                   {"epochs": args.epochs, "batch_size": args.batch_size,
                    "lr": args.lr, "seed": args.seed}))
        loss_cfg = _loss_config(
            _merge(dataclasses.asdict(S.LossConfig()), cfg_file.get("loss", {}),
                   {"aux_loss_weight": args.aux_weight,
                    "train_parallel": args.parallel or None}))
        n_noise = args.noise
        dataset = S.build_solver_dataset(scenes, tokenizers, vocab, tasks=tasks,
                                         n_noise=n_noise, seed=train_cfg.seed)

        patch = args.patch_size if args.patch_size is not None else 8
        if h % patch or w % patch:
            raise CliError(f"patch size {patch} does not divide {h}x{w} images")
        depth_grid = (2, 2)
        if "dep" in tokenizers:
            ratio = tokenizers["dep"].config.downsample_ratio
            if h % ratio or w % ratio:
                raise CliError(f"depth tokenizer ratio {ratio} does not divide {h}x{w}")
            depth_grid = (h // ratio, w // ratio)
        longest = max(len(ex.tokens.ids) for t in tasks for ex in dataset.examples[t])
        flag_cfg = {"embed_dim": args.embed_dim, "n_heads": args.heads,
                    "n_encoder_blocks": args.enc_blocks,
                    "n_decoder_blocks": args.dec_blocks,
                    "max_seq_len": args.max_seq_len}
        solver_cfg = _solver_config(
            _merge({"vocab_size": vocab.total, "patch_size": patch,
                    "memory_grid": (h // patch, w // patch),
                    "depth_grid": depth_grid,
                    "max_seq_len": max(longest + 1, depth_grid[0] * depth_grid[1] + 1)},
                   cfg_file.get("solver", {}), flag_cfg))
        model = S.build_solver(solver_cfg, np.random.default_rng(train_cfg.seed))
        start_epoch = 0

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.jsonl")
    model, history = S.train_solver(model, dataset, tokenizers, loss_cfg, train_cfg,
                                    tasks=tasks, log_path=log_path,
                                    start_epoch=start_epoch)
    ckpt = os.path.join(args.out, "solver.ckpt")
    save_solver_checkpoint(ckpt, model, vocab, tasks, tok_refs, train_cfg, loss_cfg,
                           train_cfg.epochs, n_noise)

    config = {"tasks": list(tasks), "solver": dataclasses.asdict(solver_cfg),
              "train": dataclasses.asdict(train_cfg),
              "loss": dataclasses.asdict(loss_cfg), "vocab": vocab.layout(),
              "n_noise": n_noise, "data": data_root, "out": args.out,
              "resume": args.resume, "start_epoch": start_epoch,
              "tokenizers": {t: r["path"] for t, r in tok_refs.items()}}
    _finish_run(args.out, "train-solver", config, train_cfg.seed, inputs, args.argv)
    _emit({"command": "train-solver", "tasks": list(tasks), "out": args.out,
           "epochs": train_cfg.epochs, "n_parameters": model.n_parameters(),
           "final": history[-1] if history else None})
    return EXIT_OK


def cmd_eval(args):
    model, meta = load_solver_checkpoint(args.ckpt)
    model.freeze()
    vocab = Vocabulary.from_layout(meta["vocab"])
    overrides = _parse_tokenizer_flags(args.tokenizer)
    tok_path = overrides.get(args.task) or meta["tokenizers"].get(args.task, {}).get("path")
    if not tok_path:
        raise CliError(
            f"checkpoint records no tokenizer for task {args.task!r}; pass --tokenizer")
    detok, _tok_meta = load_tokenizer_checkpoint(tok_path)
    detok.freeze()
    expected = vocab.k_depth if args.task == "dep" else vocab.k_mask
    if detok.config.codebook_size != expected:
        key = "k_depth" if args.task == "dep" else "k_mask"
        raise CliError(
            "vocabulary mismatch between solver checkpoint and tokenizer:\n"
            f"  {key}: checkpoint {expected}, tokenizer {detok.config.codebook_size}")

    data_root = _data_root(args.data)
    scenes = load_scenes(os.path.join(data_root, SCENES_FILE))
    if args.limit is not None:
        scenes = scenes[: args.limit]
    if not scenes:
        raise CliError("no scenes to evaluate")
    soft_detok = {"auto": None, "on": True, "off": False}[args.soft_detok]
    options = S.DecodeOptions(mode=args.mode, temperature=args.temperature,
                              parallel=args.parallel, soft_detok=soft_detok,
                              max_instances=args.max_instances)

    t0 = time.time()
    if args.task == "dep":
        lo, hi = detok.config.input_range
        fields = {k: [] for k in ("rmse", "rel", "log10", "delta1", "delta2", "delta3")}
        norm = []
        for s in scenes:
            pred = S.infer(model, s.image, "dep", options, detok, vocab)
            m = depth_metrics(pred.values, s.depth.values, s.depth.valid)
            for k in fields:
                fields[k].append(getattr(m, k))
            diff = (pred.values - s.depth.values)[s.depth.valid] / (hi - lo)
            norm.append(float(np.sqrt(np.mean(diff**2))))
        metrics = {k: float(np.mean(v)) for k, v in fields.items()}
        metrics["rmse_normalized"] = float(np.mean(norm))
    elif args.task == "ins":
        examples = [
            S.SolverExample(image=s.image, tokens=None,
                            gt_pairs=[(inst.class_id, mask)
                                      for inst, mask in zip(s.instances, s.masks)])
            for s in scenes
        ]
        metrics = S.eval_solver_instances(model, examples, detok, vocab, options)
    else:
        raise CliError(f"unknown task {args.task!r}; expected dep or ins")
    runtime = time.time() - t0

    payload = {"command": "eval", "task": args.task, "mode": args.mode,
               "soft_detok": args.soft_detok, "parallel": args.parallel,
               "temperature": args.temperature, "ckpt": args.ckpt,
               "n_images": len(scenes), "metrics": metrics,
               "runtime_s": round(runtime, 4)}
    _emit(payload)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "metrics.json"), payload)
        inputs = {args.ckpt: _sha256_file(args.ckpt), tok_path: _sha256_file(tok_path)}
        config = {k: v for k, v in payload.items() if k not in ("metrics", "runtime_s")}
        config["data"] = data_root
        config["limit"] = args.limit
        _finish_run(args.out, "eval", config, 0, inputs, args.argv)
    return EXIT_OK


# -- invariant suites -----------------------------------------------------------------


def _suite_vq(n, seed):
    rng = np.random.default_rng(seed)
    failures = []
    cb = Codebook(16, 8, rng, decay=0.97)

    onehot = np.eye(cb.n_codes, dtype=np.float64)
    if not np.array_equal(embed_soft(onehot, cb).data, cb.embeddings.astype(np.float64)):
        failures.append("one-hot soft embedding differs from hard codebook rows")

    for trial in range(n):
        z = rng.standard_normal((32, cb.dim)).astype(np.float32)
        idx, z_q = quantize_hard(z, cb)
        idx2, z_q2 = quantize_hard(z_q, cb)
        if not (np.array_equal(idx, idx2) and np.array_equal(z_q, z_q2)):
            failures.append(f"trial {trial}: quantization is not idempotent")
            break

    lo, hi = cb.embeddings.min(axis=0), cb.embeddings.max(axis=0)
    for trial in range(n):
        p = rng.random((8, cb.n_codes))
        p /= p.sum(axis=1, keepdims=True)
        emb = embed_soft(p, cb).data
        if np.any(emb < lo - 1e-5) or np.any(emb > hi + 1e-5):
            failures.append(f"trial {trial}: soft embedding left the codebook hull")
            break

    for trial in range(min(n, 64)):
        z = rng.standard_normal((40, cb.dim)).astype(np.float32)
        idx, _ = quantize_hard(z, cb)
        before = float(cb.ema_size.sum())
        ema_update(cb, z, idx)
        expect = cb.decay * before + (1.0 - cb.decay) * len(idx)
        if abs(float(cb.ema_size.sum()) - expect) > 1e-5:
            failures.append(f"trial {trial}: EMA counts not conserved")
            break

    return {"suite": "vq", "n": n, "failures": failures}


def _suite_codec(n, seed):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(n_classes=5)
    failures = []

    for trial in range(n):
        records = []
        for _ in range(int(rng.integers(0, 8))):
            records.append((
                [int(x) for x in rng.integers(0, vocab.n_coord_bins, 4)],
                int(rng.integers(0, vocab.n_classes + 1)),
                [int(x) for x in rng.integers(0, vocab.k_mask, 16)],
                bool(rng.random() < 0.3),
            ))
        seq = build_instance_sequence(records, vocab)
        back = [(list(b), int(c), list(m)) for b, c, m in
                parse_instance_sequence(seq.ids, vocab)]
        if back != [r[:3] for r in records]:
            failures.append(f"trial {trial}: instance records did not roundtrip")
            break

    bound = 1.0 / (2 * vocab.n_coord_bins)
    for trial in range(n):
        box = tuple(float(x) for x in rng.random(4))
        bins = quantize_box(box, vocab.n_coord_bins)
        deq = dequantize_box(bins, vocab.n_coord_bins)
        if max(abs(a - b) for a, b in zip(box, deq)) > bound + 1e-12:
            failures.append(f"trial {trial}: box dequantization error above {bound}")
            break
        if quantize_box(deq, vocab.n_coord_bins) != bins:
            failures.append(f"trial {trial}: box quantization is not idempotent")
            break

    for trial in range(n):
        h, w = (int(x) for x in rng.integers(1, 6, 2))
        grid = rng.integers(0, vocab.k_depth, (h, w))
        back = decode_depth(encode_depth(grid, vocab), (h, w), vocab)
        if not np.array_equal(back, grid):
            failures.append(f"trial {trial}: depth grid did not roundtrip")
            break

    return {"suite": "codec", "n": n, "failures": failures}


def _suite_interp(n, seed):
    rng = np.random.default_rng(seed)
    failures = []
    ratio, n_bins, rng_range = 4, 128, (0.0, 10.0)
    half_bin = (rng_range[1] - rng_range[0]) / n_bins / 2

    for trial in range(n):
        value = float(rng.uniform(*rng_range))
        field = np.full((32, 32), value, dtype=np.float32)
        grid = interpolation_tokenize(field, ratio, n_bins=n_bins, value_range=rng_range)
        if grid.shape != (8, 8) or grid.dtype != np.int64:
            failures.append(f"trial {trial}: bad grid shape/dtype {grid.shape} {grid.dtype}")
            break
        back = interpolation_detokenize(grid, ratio, n_bins=n_bins, value_range=rng_range)
        if np.abs(back - field).max() > half_bin + 1e-5:
            failures.append(f"trial {trial}: constant field error above half a bin")
            break

    for trial in range(n):
        blocks = rng.random((8, 8)) > 0.5
        mask = np.kron(blocks, np.ones((ratio, ratio))).astype(np.float32)
        grid = interpolation_tokenize(mask, ratio, mode="nearest")
        back = interpolation_detokenize(grid, ratio, mode="nearest")
        if not np.array_equal(back, mask):
            failures.append(f"trial {trial}: block-aligned mask did not roundtrip")
            break

    return {"suite": "interp", "n": n, "failures": failures}


def cmd_roundtrip(args):
    suites = {"vq": _suite_vq, "codec": _suite_codec, "interp": _suite_interp}
    result = suites[args.suite](args.n, args.seed)
    result["ok"] = not result["failures"]
    _emit(result)
    if result["failures"]:
        raise InvariantFailure(f"{args.suite} suite: {result['failures'][0]}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck_suite(args.seed)
    worst = max(err for _, err in results)
    _emit({"command": "gradcheck", "cases": {name: err for name, err in results},
           "max_rel_err": worst, "threshold": GRADCHECK_THRESHOLD,
           "ok": bool(worst < GRADCHECK_THRESHOLD)})
    if worst >= GRADCHECK_THRESHOLD:
        bad = [name for name, err in results if err >= GRADCHECK_THRESHOLD]
        raise InvariantFailure(f"gradient checks failed: {', '.join(bad)}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="vistok",
                description="Tokenize visual task outputs and solve tasks over tokens.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-data", help="render synthetic scenes into a data directory")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=64, help="number of scenes")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--spec", default=None, help="JSON file of scene parameters")
    g.add_argument("--image-size", type=int, default=None)
    g.add_argument("--objects", default=None, help="object count range as min,max")
    g.add_argument("--previews", type=int, default=4, help="PGM previews to render")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-tokenizer", help="fit a VQ tokenizer on depth maps or masks")
    t.add_argument("--task", required=True, choices=("depth", "mask"))
    t.add_argument("--data", default=None, help=f"data directory (default ${DATA_ROOT_ENV})")
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="JSON with tokenizer/train sections")
    t.add_argument("--mask-ratio", type=float, default=0.0,
                   help="fraction of input patches blanked during training")
    t.add_argument("--patch-size", type=int, default=16, help="augmentation patch size")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--codebook-size", type=int, default=None)
    t.add_argument("--code-dim", type=int, default=None)
    t.add_argument("--layers", type=int, default=None,
                   help="stride-2 layers; downsample ratio is 2**layers")
    t.add_argument("--warmup-epochs", type=int, default=None,
                   help="epochs decoded from the smooth latent before quantization "
                        "kicks in (codebook re-seeds at the handoff)")
    t.add_argument("--resume", default=None,
                   help="checkpoint to continue from (its config and seed win)")
    t.set_defaults(fn=cmd_train_tokenizer)

    s = sub.add_parser("train-solver", help="train the sequence solver over frozen tokenizers")
    s.add_argument("--data", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", default="dep", help="comma list from {dep,ins}")
    s.add_argument("--tokenizer", action="append", metavar="TASK=CKPT",
                   help="frozen tokenizer checkpoint per task; repeatable")
    s.add_argument("--config", default=None, help="JSON with solver/train/loss sections")
    s.add_argument("--aux-weight", type=float, default=None,
                   help="weight of the decoded-output loss added to token CE")
    s.add_argument("--parallel", action="store_true",
                   help="also train the one-shot depth query head")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--embed-dim", type=int, default=None)
    s.add_argument("--heads", type=int, default=None)
    s.add_argument("--enc-blocks", type=int, default=None)
    s.add_argument("--dec-blocks", type=int, default=None)
    s.add_argument("--patch-size", type=int, default=None)
    s.add_argument("--max-seq-len", type=int, default=None)
    s.add_argument("--noise", type=int, default=2, help="noise records per training image")
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--coord-bins", type=int, default=2000)
    s.add_argument("--resume", default=None,
                   help="solver checkpoint to continue from (its config and seed win)")
    s.set_defaults(fn=cmd_train_solver)

    e = sub.add_parser("eval", help="evaluate a solver checkpoint; metrics JSON on stdout")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", required=True, choices=("dep", "ins"))
    e.add_argument("--data", default=None)
    e.add_argument("--mode", default="hard", choices=("hard", "soft"))
    e.add_argument("--soft-detok", default="auto", choices=("auto", "on", "off"),
                   help="feed the detokenizer distributions (on) or argmax ids (off)")
    e.add_argument("--parallel", action="store_true",
                   help="decode depth in one forward pass")
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--max-instances", type=int, default=8)
    e.add_argument("--limit", type=int, default=None, help="evaluate only the first N scenes")
    e.add_argument("--tokenizer", action="append", metavar="TASK=CKPT",
                   help="override the tokenizer recorded in the checkpoint")
    e.add_argument("--out", default=None, help="also write metrics.json + manifest here")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("roundtrip", help="run a lossless-coding invariant suite")
    r.add_argument("--suite", required=True, choices=("vq", "codec", "interp"))
    r.add_argument("--n", type=int, default=1000, help="random trials per check")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_roundtrip)

    c = sub.add_parser("gradcheck", help="finite-difference checks over all primitives")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None):
    parser = build_parser()
    raw_argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        args = parser.parse_args(raw_argv)
        args.argv = raw_argv
        return args.fn(args) or EXIT_OK
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_OPERATIONAL
    except (TrainingDiverged, InvariantFailure) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL
    except (OSError, FormatError, DecodeError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL


if __name__ == "__main__":
    sys.exit(main())
