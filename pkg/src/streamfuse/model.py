"""Transformer encoder-decoder with switchable stream-fusion wiring.

Modes:

* ``baseline_mag`` / ``baseline_phase``: one encoder on one stream.
* ``early``: both streams stacked as two CNN input channels, one encoder.
* ``mid_ws`` / ``t_mid_ws``: two encoders, two encoder-decoder attentions
  per decoder block, outputs combined as ``alpha*h_mag + (1-alpha)*h_phase``;
  ``t_mid_ws`` ties both attentions to one parameter set.
* ``mid_cc``: two encoders, attention outputs of width d/2 concatenated and
  added to the self-attention residual.
* ``mel_t_mag`` / ``mel_t_phase``: trained like ``t_mid_ws`` with the weight
  ``alpha`` on the named stream; at inference only that stream's encoder and
  the shared attention are used.
"""
from dataclasses import asdict, dataclass, fields
import math

import numpy as np

from . import nn
from . import tensor as T
from . import vocab
from .nn import ConfigError

FUSION_MODES = (
    "baseline_mag", "baseline_phase", "early", "mid_ws", "mid_cc", "t_mid_ws",
    "mel_t_mag", "mel_t_phase",
)
STREAM_OF = {"mag": "magnitude", "phase": "phase"}


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    enc_blocks: int = 4
    dec_blocks: int = 2
    ffn_mult: int = 4
    vocab_size: int = vocab.SIZE
    fusion_mode: str = "baseline_mag"
    alpha: float = 0.9
    dropout: float = 0.1
    feat_dim: int = 83
    cnn_channels: tuple = (32, 32, 64, 64)

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        self.validate()

    def validate(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.fusion_mode == "mid_cc" and self.d_model % 2:
            raise ConfigError("mid_cc needs an even d_model")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if len(self.cnn_channels) != 4:
            raise ConfigError("the CNN front end has exactly four layers")

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            kw[key] = _parse_field(types[key], val)
        return cls(**kw)


def _parse_field(typ, val):
    if typ in (int, "int"):
        return int(val)
    if typ in (float, "float"):
        return float(val)
    if typ in (tuple, "tuple"):
        return tuple(int(x) for x in val.split(","))
    return val


CNN_STRIDES = (1, 2, 1, 2)


def subsampled_length(n):
    for s in CNN_STRIDES:
        n = (n + s - 1) // s
    return n


def early_stack(o, u):
    """Stack magnitude and phase features [B, T, F] as channels -> [B, 2, T, F]."""
    o, u = np.asarray(o), np.asarray(u)
    if o.shape != u.shape:
        raise ValueError(f"stream shapes differ: {o.shape} vs {u.shape}")
    return np.stack([o, u], axis=1)


def fuse_mid_ws(h_mag, h_phase, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    return T.add(T.mul(h_mag, alpha), T.mul(h_phase, 1.0 - alpha))


def fuse_mid_cc(h_mag, h_phase, residual):
    d = residual.shape[-1]
    if h_mag.shape[-1] + h_phase.shape[-1] != d or h_mag.shape[-1] != h_phase.shape[-1]:
        raise ConfigError(
            f"branch widths {h_mag.shape[-1]}+{h_phase.shape[-1]} do not match residual width {d}")
    return T.add(T.concat([h_mag, h_phase], axis=-1), residual)


class FusionModel:
    """Configuration plus a flat ``name -> Tensor`` parameter map."""

    def __init__(self, config, params=None, seed=0, dtype=None):
        self.config = config
        self.dtype = np.dtype(dtype or T.get_default_dtype()).type
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params
        self._check_shapes()

    # ------------------------------------------------------------ wiring

    @property
    def mode(self):
        return self.config.fusion_mode

    @property
    def tied(self):
        return self.mode in ("t_mid_ws", "mel_t_mag", "mel_t_phase")

    def encoder_streams(self, inference=False):
        m = self.mode
        if m == "baseline_mag":
            return ("mag",)
        if m == "baseline_phase":
            return ("phase",)
        if m == "early":
            return ("early",)
        if inference and m == "mel_t_mag":
            return ("mag",)
        if inference and m == "mel_t_phase":
            return ("phase",)
        return ("mag", "phase")

    def required_features(self, inference=False):
        need = set()
        for s in self.encoder_streams(inference):
            need.update(("mag", "phase") if s == "early" else (s,))
        return tuple(sorted(need))

    def src_attn_prefix(self, block, stream, dual):
        base = f"dec.block{block}."
        if not dual or self.tied:
            return base + "src_attn."
        return base + f"src_attn_{stream}."

    def branch_params(self, block):
        """(mag, phase) encoder-decoder attention parameter lists of one block."""
        names = lambda s: nn.attention_keys(self.src_attn_prefix(block, s, True))
        return [self.params[k] for k in names("mag")], [self.params[k] for k in names("phase")]

    # ------------------------------------------------------------ params

    def _init_params(self, rng):
        c, dt = self.config, self.dtype
        d = c.d_model
        p = {}
        for s in self.encoder_streams(inference=False):
            in_ch = 2 if s == "early" else 1
            pre = f"enc_{s}."
            for i, ch in enumerate(c.cnn_channels):
                std = math.sqrt(2.0 / (in_ch * 9))
                p[f"{pre}conv{i}.w"] = T.Tensor(rng.normal(0, std, (ch, in_ch, 3, 3)).astype(dt), requires_grad=True)
                p[f"{pre}conv{i}.b"] = T.Tensor(np.zeros(ch, dt), requires_grad=True)
                in_ch = ch
            f_out = c.feat_dim
            for st in CNN_STRIDES:
                f_out = (f_out + st - 1) // st
            nn.init_linear(p, pre + "proj.", rng, in_ch * f_out, d, dt)
            nn.init_layer_norm(p, pre + "proj_norm.", d, dt)
            for j in range(c.enc_blocks):
                b = f"{pre}block{j}."
                nn.init_layer_norm(p, b + "ln1.", d, dt)
                nn.init_attention(p, b + "attn.", rng, d, dt)
                nn.init_layer_norm(p, b + "ln2.", d, dt)
                nn.init_feed_forward(p, b + "ffn.", rng, d, c.ffn_mult * d, dt)
            nn.init_layer_norm(p, pre + "norm.", d, dt)
        p["dec.embed"] = T.Tensor(rng.normal(0, d ** -0.5, (c.vocab_size, d)).astype(dt), requires_grad=True)
        dual = len(self.encoder_streams(inference=False)) == 2
        for j in range(c.dec_blocks):
            b = f"dec.block{j}."
            nn.init_layer_norm(p, b + "ln1.", d, dt)
            nn.init_attention(p, b + "self_attn.", rng, d, dt)
            nn.init_layer_norm(p, b + "ln2.", d, dt)
            if not dual or self.tied:
                nn.init_attention(p, b + "src_attn.", rng, d, dt)
            else:
                out = d // 2 if self.mode == "mid_cc" else d
                nn.init_attention(p, b + "src_attn_mag.", rng, d, dt, out_dim=out)
                nn.init_attention(p, b + "src_attn_phase.", rng, d, dt, out_dim=out)
            nn.init_layer_norm(p, b + "ln3.", d, dt)
            nn.init_feed_forward(p, b + "ffn.", rng, d, c.ffn_mult * d, dt)
        nn.init_layer_norm(p, "dec.norm.", d, dt)
        nn.init_linear(p, "dec.out.", rng, d, c.vocab_size, dt)
        return p

    def _check_shapes(self):
        ref = FusionModel.__new__(FusionModel)
        ref.config, ref.dtype = self.config, self.dtype
        with T.no_grad():
            shapes = {k: v.shape for k, v in ref._init_params(np.random.default_rng(0)).items()}
        if set(shapes) != set(self.params):
            missing = sorted(set(shapes) - set(self.params))
            extra = sorted(set(self.params) - set(shapes))
            raise ConfigError(f"parameter names do not match config (missing {missing[:3]}, extra {extra[:3]})")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ConfigError(f"parameter {k} has shape {self.params[k].shape}, config expects {s}")

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, config, arrays, dtype=None):
        dt = np.dtype(dtype or T.get_default_dtype()).type
        params = {k: T.Tensor(np.asarray(v, dtype=dt), requires_grad=True) for k, v in arrays.items()}
        return cls(config, params=params, dtype=dt)

    def inference_model(self):
        """Single-encoder model sharing this model's inference parameters.

        For MEL modes this is the baseline of the inference stream built from
        the shared parameter subset (same Tensor objects); for all other modes
        it is ``self``.
        """
        if self.mode not in ("mel_t_mag", "mel_t_phase"):
            return self
        stream = "mag" if self.mode == "mel_t_mag" else "phase"
        other = "phase" if stream == "mag" else "mag"
        cfg = ModelConfig(**{**asdict(self.config), "fusion_mode": f"baseline_{stream}"})
        sub = {k: v for k, v in self.params.items() if not k.startswith(f"enc_{other}.")}
        return FusionModel(cfg, params=sub, dtype=self.dtype)

    # ------------------------------------------------------------ forward

    def _dropper(self, training, rng):
        rate = self.config.dropout

        def drop(x):
            return T.dropout(x, rate, rng, training)

        return drop

    def encode(self, feats, lengths, stream, training=False, rng=None):
        """Encode one stream. ``feats`` is [B, T, F] (or [B, 2, T, F] for ``early``).

        Returns ``(enc [B, T', d], key_mask [B, T'])``.
        """
        c = self.config
        p = self.params
        drop = self._dropper(training, rng)
        x = np.asarray(feats, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        B, _, Tn, _ = x.shape
        lengths = np.asarray(lengths, dtype=np.int64)
        if subsampled_length(Tn) == 0:
            raise ValueError("input too short for the CNN subsampler")
        pad_free = bool(np.all(lengths == Tn))
        if not pad_free:
            x = x * (np.arange(Tn)[None, :] < lengths[:, None])[:, None, :, None]
        h = T.Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))  # channels-last
        cur = lengths.copy()
        pre = f"enc_{stream}."
        for i, st in enumerate(CNN_STRIDES):
            h = T.relu(T.conv2d_nhwc(h, p[f"{pre}conv{i}.w"], p[f"{pre}conv{i}.b"], stride=st))
            cur = (cur + st - 1) // st
            if not pad_free:
                # zero frames past each utterance's end so padding never leaks into valid frames
                tm = (np.arange(h.shape[1])[None, :] < cur[:, None]).astype(self.dtype)
                h = T.mul(h, T.Tensor(tm[:, :, None, None]))
        _, Tp, Fp, C = h.shape
        h = h.reshape(B, Tp, Fp * C)
        h = T.linear(h, p[pre + "proj.w"], p[pre + "proj.b"])
        # unnormalised ReLU-CNN output drifts to rms in the hundreds and drowns the positional table
        h = nn.layer_norm(p, pre + "proj_norm.", h)
        h = T.add(h, T.Tensor(nn.positional_table(Tp, c.d_model, self.dtype)))
        h = drop(h)
        key_mask = np.arange(Tp)[None, :] < cur[:, None]
        att_mask = key_mask[:, None, None, :]
        for j in range(c.enc_blocks):
            b = f"{pre}block{j}."
            a = nn.layer_norm(p, b + "ln1.", h)
            h = T.add(h, drop(nn.multi_head_attention(p, b + "attn.", a, a, c.heads, att_mask)))
            f = nn.layer_norm(p, b + "ln2.", h)
            h = T.add(h, drop(nn.feed_forward(p, b + "ffn.", f, drop)))
        h = nn.layer_norm(p, pre + "norm.", h)
        return h, key_mask

    def encode_all(self, batch_feats, lengths, training=False, rng=None, inference=False):
        """``batch_feats``: dict with "mag"/"phase" arrays [B, T, F]. Returns stream -> (enc, mask)."""
        out = {}
        for s in self.encoder_streams(inference):
            if s == "early":
                self._require(batch_feats, ("mag", "phase"))
                x = early_stack(batch_feats["mag"], batch_feats["phase"])
            else:
                self._require(batch_feats, (s,))
                x = batch_feats[s]
            out[s] = self.encode(x, lengths, s, training, rng)
        return out

    def _require(self, feats, streams):
        for s in streams:
            if feats.get(s) is None:
                raise ConfigError(f"mode {self.mode} needs {STREAM_OF[s]} features")

    def decode_block(self, j, y, encs, causal, training=False, rng=None):
        """One decoder block. ``encs`` maps stream -> (enc, key_mask)."""
        c = self.config
        p = self.params
        drop = self._dropper(training, rng)
        b = f"dec.block{j}."
        a = nn.layer_norm(p, b + "ln1.", y)
        h = T.add(y, drop(nn.multi_head_attention(p, b + "self_attn.", a, a, c.heads, causal)))
        q = nn.layer_norm(p, b + "ln2.", h)

        def branch(stream):
            enc, km = encs[stream]
            return drop(nn.multi_head_attention(
                p, self.src_attn_prefix(j, stream, len(encs) == 2), q, enc, c.heads, km[:, None, None, :]))

        if len(encs) == 1:
            if self.mode in ("mid_ws", "mid_cc", "t_mid_ws"):
                raise ConfigError(f"mode {self.mode} needs both encoder outputs")
            (stream,) = encs
            mid = T.add(h, branch(stream))
        elif len(encs) == 2:
            if self.mode == "mid_cc":
                mid = fuse_mid_cc(branch("mag"), branch("phase"), h)
            else:
                h_mag = T.add(h, branch("mag"))
                h_phase = T.add(h, branch("phase"))
                w = c.alpha if self.mode != "mel_t_phase" else 1.0 - c.alpha
                mid = fuse_mid_ws(h_mag, h_phase, w)
        else:
            raise ConfigError("decoder block takes one or two encoder outputs")
        f = nn.layer_norm(p, b + "ln3.", mid)
        return T.add(mid, drop(nn.feed_forward(p, b + "ffn.", f, drop)))

    def decode(self, encs, dec_in, training=False, rng=None):
        """Teacher-forced decoder pass: ids [B, L] -> log-probabilities [B, L, D]."""
        c = self.config
        p = self.params
        dec_in = np.asarray(dec_in, dtype=np.int64)
        B, L = dec_in.shape
        drop = self._dropper(training, rng)
        y = T.mul(T.embedding(p["dec.embed"], dec_in), math.sqrt(c.d_model))
        y = drop(T.add(y, T.Tensor(nn.positional_table(L, c.d_model, self.dtype))))
        causal = nn.causal_mask(L)[None, None]
        for j in range(c.dec_blocks):
            y = self.decode_block(j, y, encs, causal, training, rng)
        y = nn.layer_norm(p, "dec.norm.", y)
        return T.log_softmax(T.linear(y, p["dec.out.w"], p["dec.out.b"]), axis=-1)

    def forward_train(self, batch_feats, lengths, dec_in, training=True, rng=None, inference=False):
        encs = self.encode_all(batch_feats, lengths, training, rng, inference)
        return self.decode(encs, dec_in, training, rng)

    def forward_step(self, encs, prefixes):
        """Next-token log-probabilities [N, D] for N prefixes of equal length.

        ``encs`` holds encoder outputs for one utterance (batch 1); they are
        broadcast over the prefixes. The whole prefix is recomputed.
        """
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim == 1:
            prefixes = prefixes[None]
        if prefixes.shape[1] == 0 or np.any(prefixes[:, 0] != vocab.BOS):
            raise ValueError("prefix must start with bos")
        if np.any(prefixes == vocab.EOS):
            raise ValueError("prefix contains eos")
        n = prefixes.shape[0]
        with T.no_grad():
            tiled = {}
            for s, (enc, km) in encs.items():
                tiled[s] = (T.Tensor(np.repeat(enc.data, n, axis=0)), np.repeat(km, n, axis=0))
            logp = self.decode(tiled, prefixes, training=False)
        return logp.data[:, -1, :]


def tie_check(model):
    """Check that both branches of every decoder block share one attention storage.

    Returns a dict report; raises ``AssertionError`` if a copy is found.
    """
    if not model.tied:
        raise ConfigError(f"tie_check applies to tied modes, not {model.mode}")
    report = {"blocks": model.config.dec_blocks, "aliased": True}
    for j in range(model.config.dec_blocks):
        mag, phase = model.branch_params(j)
        for a, b in zip(mag, phase):
            if a is not b or not np.shares_memory(a.data, b.data):
                raise AssertionError(f"decoder block {j}: attention parameters are copies, not aliases")
    return report
