"""Label-smoothed cross-entropy, length-bucketed batching and the training loop."""
from dataclasses import dataclass
import os

import numpy as np

from . import checkpoint, optim, vocab
from . import tensor as T
from .corpus import read_manifest
from .frontend import FeatureSequence, read_features, spec_augment
from .model import FusionModel, ModelConfig, tie_check
from .nn import ConfigError

FEAT_SUFFIX = ".feat"
STREAM_NAMES = {"mag": "magnitude", "phase": "phase"}


class DataError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    warmup: int = 1000
    lr_scale: float = 1.0
    label_smoothing: float = 0.1
    seed: int = 0
    spec_augment: bool = False
    fusion_mode: str = "baseline_mag"
    alpha: float = 0.9
    clip_norm: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.warmup < 1:
            raise ConfigError("epochs must be >= 0 and warmup >= 1")


# ---------------------------------------------------------------- data

@dataclass
class Example:
    uid: str
    feats: dict  # "mag"/"phase" -> [T, 83] float32
    tokens: list
    transcript: str = ""

    @property
    def num_frames(self):
        return next(iter(self.feats.values())).shape[0]


def feature_path(feat_dir, uid):
    return os.path.join(feat_dir, uid + FEAT_SUFFIX)


def load_examples(manifest, feat_dirs, streams, strict=True):
    """Read transcripts and feature files.

    ``feat_dirs`` maps "mag"/"phase" to directories of ``<uid>.feat`` files.
    With ``strict`` a missing stream or file raises; otherwise the example is
    returned with ``feats`` lacking that stream and an error string collected.
    Returns ``(examples, errors)``.
    """
    rows = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else manifest
    for s in streams:
        if not feat_dirs.get(s):
            raise ConfigError(f"no {STREAM_NAMES[s]} feature directory configured")
        if strict and not os.path.isdir(feat_dirs[s]):
            raise ConfigError(f"{STREAM_NAMES[s]} feature directory {feat_dirs[s]!r} does not exist")
    examples, errors = [], []
    for u in rows:
        feats = {}
        for s in streams:
            path = feature_path(feat_dirs[s], u.id)
            try:
                feats[s] = read_features(path, u.id).frames
            except (OSError, ValueError) as exc:
                if strict:
                    raise DataError(f"{u.id}: cannot read {STREAM_NAMES[s]} features: {exc}") from exc
                errors.append(f"{u.id}\t{STREAM_NAMES[s]} features: {exc}")
        if len({f.shape[0] for f in feats.values()}) > 1:
            raise DataError(f"{u.id}: streams have different frame counts")
        examples.append(Example(u.id, feats, vocab.encode(u.transcript), u.transcript))
    return examples, errors


@dataclass
class Batch:
    uids: list
    feats: dict  # stream -> [B, T, F]
    lengths: np.ndarray
    dec_in: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray  # True where a real target exists
    frame_mask: np.ndarray  # True for real frames

    @property
    def padded_cells(self):
        return int((~self.frame_mask).sum())


def make_batches(lengths, batch_size, seed, epoch=0):
    """Sort by length, cut into consecutive buckets, shuffle bucket order.

    Returns a list of index arrays. The order depends only on ``seed``,
    ``epoch`` and the lengths.
    """
    lengths = np.asarray(lengths)
    if lengths.size == 0:
        raise DataError("no utterances to batch")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.lexsort((np.arange(lengths.size), lengths))
    buckets = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    rng = np.random.default_rng([seed, epoch])
    return [buckets[i] for i in rng.permutation(len(buckets))]


def collate(examples, streams, augment_rng=None, policy=None):
    B = len(examples)
    lengths = np.array([e.num_frames for e in examples], dtype=np.int64)
    t_max = int(lengths.max())
    feats = {}
    for s in streams:
        arr = np.zeros((B, t_max, examples[0].feats[s].shape[1]), np.float32)
        for i, e in enumerate(examples):
            x = e.feats[s]
            if augment_rng is not None:
                x = spec_augment(FeatureSequence(x, STREAM_NAMES[s], e.uid), augment_rng, policy).frames
            arr[i, :x.shape[0]] = x
        feats[s] = arr
    l_max = max(len(e.tokens) for e in examples) + 1
    dec_in = np.full((B, l_max), vocab.EOS, np.int64)
    targets = np.full((B, l_max), vocab.EOS, np.int64)
    tmask = np.zeros((B, l_max), bool)
    for i, e in enumerate(examples):
        n = len(e.tokens)
        dec_in[i, 0] = vocab.BOS
        dec_in[i, 1:n + 1] = e.tokens
        targets[i, :n] = e.tokens
        targets[i, n] = vocab.EOS
        tmask[i, :n + 1] = True
    frame_mask = np.arange(t_max)[None, :] < lengths[:, None]
    return Batch([e.uid for e in examples], feats, lengths, dec_in, targets, tmask, frame_mask)


# ---------------------------------------------------------------- loss

def label_smooth_ce(logp, targets, eps=0.1, pad_mask=None):
    """Mean over real positions of -[(1-eps) logp[t] + eps/(D-1) sum_{k!=t} logp[k]]."""
    targets = np.asarray(targets, dtype=np.int64)
    D = logp.shape[-1]
    if targets.size and (targets.max() >= D or targets.min() < 0):
        raise DataError(f"target id outside vocabulary of size {D}")
    if pad_mask is None:
        pad_mask = np.ones(targets.shape, bool)
    off = eps / (D - 1) if D > 1 else 0.0
    w = np.full(logp.shape, off, dtype=logp.data.dtype)
    np.put_along_axis(w, targets[..., None], 1.0 - eps, axis=-1)
    w *= pad_mask[..., None]
    n = int(pad_mask.sum())
    if n == 0:
        raise DataError("batch has no target positions")
    return T.mul(T.tsum(T.mul(logp, T.Tensor(w))), -1.0 / n)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    epoch_losses: list
    steps: int
    checkpoints: list
    log_path: str
    grad_norms: dict


def model_config_path(out_dir):
    return os.path.join(out_dir, "model.cfg")


def save_model(path, model):
    checkpoint.save_checkpoint(path, model.state_dict())
    with open(os.path.join(os.path.dirname(path) or ".", "model.cfg"), "w") as fh:
        fh.write(model.config.to_text())


def load_model(ckpt_path, config_path=None, dtype=None):
    """Rebuild a model from a checkpoint and its ``model.cfg`` sidecar."""
    config_path = config_path or os.path.join(os.path.dirname(ckpt_path) or ".", "model.cfg")
    with open(config_path) as fh:
        cfg = ModelConfig.from_text(fh.read())
    return FusionModel.from_state(cfg, checkpoint.load_checkpoint(ckpt_path), dtype)


def _encoder_grad_norms(model):
    norms = {}
    for s in model.encoder_streams():
        pre = f"enc_{s}."
        tot = 0.0
        for k, p in model.params.items():
            if k.startswith(pre) and p.grad is not None:
                tot += float(np.sum(p.grad.astype(np.float64) ** 2))
        norms[s] = tot ** 0.5
    return norms


def train(model, examples, cfg, out_dir, progress=None):
    """Run ``cfg.epochs`` epochs over ``examples``; write checkpoints and the loss log.

    Files: ``epoch0.ckpt`` (initial), ``epoch{N}.ckpt`` per epoch, ``final.ckpt``,
    ``model.cfg`` and ``loss.tsv``. With zero epochs only ``epoch0.ckpt`` and
    its ``model.cfg`` are written. A non-finite loss or gradient stops
    training; the parameters from before the failing step are saved as
    ``last_good.ckpt`` and :class:`TrainingAborted` is raised.
    """
    if (cfg.fusion_mode, cfg.alpha) != (model.mode, model.config.alpha):
        raise ConfigError("training config and model disagree on fusion_mode/alpha")
    os.makedirs(out_dir, exist_ok=True)
    streams = model.required_features()
    for e in examples[:1]:
        missing = [s for s in streams if s not in e.feats]
        if missing:
            raise ConfigError(f"mode {model.mode} needs {STREAM_NAMES[missing[0]]} features")
    params = model.params
    state = optim.AdamState()
    rng = np.random.default_rng(cfg.seed)
    ckpts = []

    def checkpoint_to(name):
        path = os.path.join(out_dir, name)
        save_model(path, model)
        ckpts.append(path)
        return path

    checkpoint_to("epoch0.ckpt")
    if cfg.epochs == 0:
        return TrainResult([], 0, ckpts, None, {s: [] for s in model.encoder_streams()})
    log_path = os.path.join(out_dir, "loss.tsv")
    epoch_losses = []
    grad_norms = {s: [] for s in model.encoder_streams()}
    step = 0
    lengths = [e.num_frames for e in examples]
    prev_check = T.set_check_finite(False)
    try:
        with open(log_path, "w") as log:
            for epoch in range(1, cfg.epochs + 1):
                total, count = 0.0, 0
                for idx in make_batches(lengths, cfg.batch_size, cfg.seed, epoch):
                    batch = collate([examples[i] for i in idx], streams,
                                    rng if cfg.spec_augment else None)
                    step += 1
                    for p in params.values():
                        p.grad = None
                    logp = model.forward_train(batch.feats, batch.lengths, batch.dec_in, training=True, rng=rng)
                    loss = label_smooth_ce(logp, batch.targets, cfg.label_smoothing, batch.target_mask)
                    value = float(loss.data)
                    batch_id = f"epoch {epoch} step {step}: " + ",".join(batch.uids)
                    if not np.isfinite(value):
                        T.clear_tape()
                        path = os.path.join(out_dir, "last_good.ckpt")
                        save_model(path, model)
                        raise TrainingAborted(f"non-finite loss at {batch_id}", path)
                    T.backward(loss)
                    norms = _encoder_grad_norms(model)
                    for s, v in norms.items():
                        grad_norms[s].append(v)
                    if model.mode.startswith("mel_") and min(norms.values()) <= 0.0:
                        raise AssertionError(f"no gradient reached an encoder at step {step}: {norms}")
                    optim.clip_grad_norm(params, cfg.clip_norm)
                    lr = optim.noam_lr(step, model.config.d_model, cfg.warmup, cfg.lr_scale)
                    try:
                        optim.adam_step(params, state, lr, batch_id)
                    except optim.NonFiniteGradient as exc:
                        path = os.path.join(out_dir, "last_good.ckpt")
                        save_model(path, model)
                        raise TrainingAborted(str(exc), path) from exc
                    log.write(f"{epoch}\t{step}\t{value:.6f}\t{lr:.6e}\n")
                    total += value * len(idx)
                    count += len(idx)
                log.flush()
                epoch_losses.append(total / count)
                if model.tied:
                    tie_check(model)
                checkpoint_to(f"epoch{epoch}.ckpt")
                if progress:
                    progress(epoch, epoch_losses[-1], step)
    finally:
        T.set_check_finite(prev_check)
    checkpoint_to("final.ckpt")
    return TrainResult(epoch_losses, step, ckpts, log_path, grad_norms)


def read_loss_log(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            ep, st, loss, lr = line.rstrip("\n").split("\t")
            rows.append((int(ep), int(st), float(loss), float(lr)))
    return rows
