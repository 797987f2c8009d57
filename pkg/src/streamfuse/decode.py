"""Beam search with late posterior fusion and shallow LM fusion.

Per step the combined score of token ``c`` is

    beta * log P_a(c) + (1 - beta) * log P_b(c)  +  lambda * log P_lm(c)

(first term is just ``log P_a`` with one model). Scores are summed along a
hypothesis without renormalisation.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import vocab
from .model import subsampled_length
from .nn import ConfigError

NEG_INF = -np.inf


@dataclass
class DecodeConfig:
    beam: int = 4
    beta: float = 0.5
    lam: float = 0.0
    max_len_ratio: float = 1.5
    min_max_len: int = 5
    length_penalty: float = 0.0
    max_len: int = None  # overrides the ratio rule when set

    def __post_init__(self):
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")

    def length_cap(self, enc_len):
        if self.max_len is not None:
            return int(self.max_len)
        return max(self.min_max_len, int(self.max_len_ratio * enc_len))


@dataclass
class Hypothesis:
    tokens: tuple  # emitted ids, without bos; ends with eos when finished
    score: float
    finished: bool = False
    truncated: bool = False

    @property
    def text(self):
        return vocab.decode(self.tokens)


class Scorer:
    """Binds one or two inference models (with their encoder outputs) and an optional LM."""

    def __init__(self, models, encs, cfg, lm=None):
        if len(models) not in (1, 2) or len(models) != len(encs):
            raise ConfigError("decode with one model or two (late fusion)")
        sizes = {m.config.vocab_size for m in models}
        if lm is not None:
            sizes.add(lm.vocab_size)
        if len(sizes) != 1:
            raise ConfigError(f"vocabulary sizes disagree: {sorted(sizes)}")
        self.models, self.encs, self.cfg, self.lm = models, encs, cfg, lm
        self.vocab_size = sizes.pop()
        self.enc_len = min(next(iter(e.values()))[0].shape[1] for e in encs)

    def __call__(self, prefixes):
        return step_scores(self.models, self.encs, prefixes, self.cfg, self.lm)


def step_scores(models, encs, prefixes, cfg, lm=None):
    """Combined next-token scores [N, D] for N equal-length prefixes (each starting with bos)."""
    lp = models[0].forward_step(encs[0], prefixes)
    if len(models) == 2:
        lp_b = models[1].forward_step(encs[1], prefixes)
        lp = cfg.beta * lp.astype(np.float64) + (1.0 - cfg.beta) * lp_b.astype(np.float64)
    else:
        lp = lp.astype(np.float64)
    if lm is not None and cfg.lam != 0.0:
        lp = lp + cfg.lam * np.stack([lm.logprob(p) for p in np.atleast_2d(prefixes)])
    return lp


def _rank(h, lp):
    return h.score + lp * len(h.tokens)


def beam_search(scorer, cfg=None, nbest=False):
    """Best finished hypothesis (and the sorted finished list when ``nbest``).

    Each step expands every live hypothesis by every token except bos and
    keeps the overall top ``beam``; those ending in eos are finished. At the
    length cap only eos may be emitted, and such hypotheses are marked
    ``truncated``. Search stops once the best finished hypothesis cannot be
    beaten, since per-step scores are never positive. Ties go to the
    lexicographically smaller token sequence.
    """
    cfg = cfg or scorer.cfg
    cap = cfg.length_cap(scorer.enc_len)
    lp = cfg.length_penalty
    live = [Hypothesis((), 0.0)]
    finished = []
    for step in range(1, cap + 1):
        prefixes = np.array([(vocab.BOS,) + h.tokens for h in live], dtype=np.int64)
        scores = scorer(prefixes)
        scores[:, vocab.BOS] = NEG_INF
        forced = step == cap
        cands = []
        for i, h in enumerate(live):
            toks = [vocab.EOS] if forced else range(scores.shape[1])
            for t in toks:
                s = scores[i, t]
                if s == NEG_INF:
                    continue
                cands.append(Hypothesis(h.tokens + (t,), h.score + float(s), t == vocab.EOS, forced))
        cands.sort(key=lambda c: (-_rank(c, lp), c.tokens))
        live = []
        for c in cands[:cfg.beam]:
            (finished if c.finished else live).append(c)
        if not live:
            break
        if finished:
            best_fin = max(_rank(h, lp) for h in finished)
            bound = max(_rank(h, lp) for h in live) + max(0.0, lp) * (cap - step)
            if best_fin >= bound:
                break
    finished.sort(key=lambda c: (-_rank(c, lp), c.tokens))
    best = finished[0]
    return (best, finished) if nbest else best


def greedy_search(scorer, cfg=None):
    """Argmax decoding under the same length cap (lowest id wins ties)."""
    cfg = cfg or scorer.cfg
    cap = cfg.length_cap(scorer.enc_len)
    tokens, score = (), 0.0
    for step in range(1, cap + 1):
        s = scorer(np.array([(vocab.BOS,) + tokens], dtype=np.int64))[0]
        s[vocab.BOS] = NEG_INF
        t = vocab.EOS if step == cap else int(np.argmax(s))
        tokens, score = tokens + (t,), score + float(s[t])
        if t == vocab.EOS:
            return Hypothesis(tokens, score, True, step == cap)
    raise AssertionError("unreachable: the cap forces eos")


# ---------------------------------------------------------------- corpus level

@dataclass
class DecodeResult:
    hypotheses: dict  # uid -> text
    nbest: dict = field(default_factory=dict)  # uid -> [Hypothesis]
    errors: list = field(default_factory=list)

    def tsv(self):
        return "".join(f"{u}\t{t}\n" for u, t in self.hypotheses.items())

    def nbest_tsv(self):
        out = []
        for u, hyps in self.nbest.items():
            for r, h in enumerate(hyps, 1):
                out.append(f"{u}\t{r}\t{h.score:.6f}\t{h.text}\n")
        return "".join(out)


def encode_utterance(model, feats):
    """Encoder outputs for one utterance (a dict stream -> [T, F])."""
    streams = model.required_features(inference=True)
    batch = {s: np.asarray(feats[s])[None] for s in streams}
    t = batch[streams[0]].shape[1]
    if subsampled_length(t) < 1:
        raise ValueError("utterance too short")
    return model.encode_all(batch, [t], training=False, inference=True)


def decode_corpus(models, examples, cfg, lm=None, nbest=False, greedy=False):
    """Decode ``examples`` (training.Example objects) in order.

    ``models`` are inference-ready (see ``FusionModel.inference_model``).
    An utterance missing a required stream is recorded in ``errors`` and
    skipped.
    """
    res = DecodeResult({})
    for e in examples:
        try:
            with T.no_grad():
                encs = [encode_utterance(m, e.feats) for m in models]
        except KeyError as exc:
            res.errors.append(f"{e.uid}\tmissing {exc.args[0]} features")
            continue
        scorer = Scorer(models, encs, cfg, lm)
        if greedy:
            best, hyps = greedy_search(scorer, cfg), None
        else:
            best, hyps = beam_search(scorer, cfg, nbest=True)
        res.hypotheses[e.uid] = best.text
        if nbest and hyps is not None:
            res.nbest[e.uid] = hyps
    return res

