"""``streamfuse`` command line: gen-corpus, extract, train, decode, score, tune, lm-train."""
import argparse
from dataclasses import asdict, fields
import os
import sys

from . import corpus, frontend, metrics, training
from .decode import DecodeConfig, decode_corpus
from .lm import NgramLM, lm_train
from .model import FusionModel, ModelConfig
from .nn import ConfigError

TRAIN_PATH_KEYS = ("train_manifest", "mag_feats", "phase_feats", "out_dir", "init_seed")


# ---------------------------------------------------------------- key=value configs

def parse_kv(text):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(typ, val, key):
    try:
        if typ in (bool, "bool"):
            low = val.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if typ in (int, "int"):
            return int(val)
        if typ in (float, "float"):
            return float(val)
        if typ in (tuple, "tuple"):
            return tuple(int(x) for x in val.split(","))
    except ValueError:
        raise ConfigError(f"bad value {val!r} for {key}") from None
    return val


def resolve_train_config(kv):
    """Split a flat key=value mapping into (ModelConfig, TrainConfig, paths)."""
    mfields = {f.name: f.type for f in fields(ModelConfig)}
    tfields = {f.name: f.type for f in fields(training.TrainConfig)}
    unknown = set(kv) - set(mfields) - set(tfields) - set(TRAIN_PATH_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    mkw = {k: _coerce(t, kv[k], k) for k, t in mfields.items() if k in kv}
    tkw = {k: _coerce(t, kv[k], k) for k, t in tfields.items() if k in kv}
    # fusion_mode and alpha live in both; one value drives both
    for shared in ("fusion_mode", "alpha"):
        if shared in mkw:
            tkw[shared] = mkw[shared]
    mcfg = ModelConfig(**mkw)
    tcfg = training.TrainConfig(**tkw)
    paths = {k: kv.get(k) for k in TRAIN_PATH_KEYS}
    if not paths["train_manifest"] or not paths["out_dir"]:
        raise ConfigError("config needs train_manifest and out_dir")
    return mcfg, tcfg, paths


def snapshot_text(mcfg, tcfg, paths):
    lines = ["# resolved training configuration"]
    for k, v in paths.items():
        if v is not None:
            lines.append(f"{k}={v}")
    for k, v in asdict(mcfg).items():
        lines.append(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
    for k, v in asdict(tcfg).items():
        if k not in ("fusion_mode", "alpha"):
            lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- subcommands

def cmd_gen_corpus(a):
    kw = {}
    if a.config:
        with open(a.config) as fh:
            raw = parse_kv(fh.read())
        types = {f.name: f.type for f in fields(corpus.SynthSpec)}
        for k, v in raw.items():
            if k not in types:
                raise ConfigError(f"unknown corpus key {k!r}")
            kw[k] = _coerce(types[k], v, k)
    for k in ("seed", "train", "dev", "test", "alphabet_size", "snr_db"):
        v = getattr(a, k)
        if v is not None:
            kw[k] = v
    spec = corpus.SynthSpec(**kw)
    manifests = corpus.gen_corpus(spec, a.out)
    for split, path in manifests.items():
        print(f"{split}\t{path}")
    return 0


def run_extract(manifest, stream, out_dir):
    """Write one FEAT0001 file per utterance. Returns the list of error lines."""
    os.makedirs(out_dir, exist_ok=True)
    errors = []
    for u in corpus.read_manifest(manifest):
        try:
            w = frontend.read_wav(u.audio_path, u.id)
            feats = frontend.extract(w, stream)
        except (OSError, EOFError, ValueError) as exc:
            errors.append(f"{u.id}\t{exc}")
            continue
        feats.utterance_id = u.id
        frontend.write_features(training.feature_path(out_dir, u.id), feats)
    return errors


def cmd_extract(a):
    errors = run_extract(a.manifest, a.stream, a.out)
    for e in errors:
        print(f"error\t{e}", file=sys.stderr)
    return 1 if errors else 0


def run_train(kv, progress=None):
    mcfg, tcfg, paths = resolve_train_config(kv)
    feat_dirs = {"mag": paths["mag_feats"], "phase": paths["phase_feats"]}
    seed = int(paths["init_seed"]) if paths["init_seed"] is not None else tcfg.seed
    model = FusionModel(mcfg, seed=seed)
    streams = model.required_features()
    examples, _ = training.load_examples(paths["train_manifest"], feat_dirs, streams)
    os.makedirs(paths["out_dir"], exist_ok=True)
    with open(os.path.join(paths["out_dir"], "train.cfg"), "w") as fh:
        fh.write(snapshot_text(mcfg, tcfg, paths))
    return training.train(model, examples, tcfg, paths["out_dir"], progress)


def cmd_train(a):
    with open(a.config) as fh:
        kv = parse_kv(fh.read())
    for item in a.set or []:
        kv.update(parse_kv(item))

    def progress(epoch, loss, step):
        print(f"epoch {epoch}\tsteps {step}\tloss {loss:.4f}", file=sys.stderr)

    res = run_train(kv, progress)
    print(res.checkpoints[-1])
    return 0


def load_decode_models(ckpts, mode):
    if mode == "single" and len(ckpts) != 1:
        raise ConfigError("--mode single takes exactly one --ckpt")
    if mode == "late" and len(ckpts) != 2:
        raise ConfigError("--mode late takes two --ckpt values")
    return [training.load_model(c).inference_model() for c in ckpts]


def _feat_dirs(a):
    return {"mag": a.mag_feats, "phase": a.phase_feats}


def _decode_inputs(a, models):
    streams = sorted({s for m in models for s in m.required_features(inference=True)})
    examples, errors = training.load_examples(a.manifest, _feat_dirs(a), streams, strict=False)
    return examples, errors


def _decode_cfg(a, **over):
    kw = dict(beam=a.beam, beta=a.beta, lam=a.lam, length_penalty=a.length_penalty)
    kw.update(over)
    return DecodeConfig(**kw)


def _load_lm(path):
    return NgramLM.load(path) if path else None


def cmd_decode(a):
    models = load_decode_models(a.ckpt, a.mode)
    examples, errors = _decode_inputs(a, models)
    res = decode_corpus(models, examples, _decode_cfg(a), _load_lm(a.lm),
                        nbest=bool(a.nbest), greedy=a.greedy)
    errors = sorted(set(errors) | set(res.errors))
    with open(a.out, "w", encoding="utf-8") as fh:
        fh.write(res.tsv())
    if a.nbest:
        with open(a.nbest, "w", encoding="utf-8") as fh:
            fh.write(res.nbest_tsv())
    for e in errors:
        print(f"error\t{e}", file=sys.stderr)
    if a.report:
        refs = {e.uid: e.transcript for e in examples}
        with open(a.report, "w") as fh:
            for unit in ("word", "char"):
                fh.write(metrics.score_corpus(refs, res.hypotheses, unit).summary_tsv())
    return 1 if errors else 0


def cmd_score(a):
    refs = metrics.read_table(a.ref)
    hyps = metrics.read_table(a.hyp)
    rep = metrics.score_corpus(refs, hyps, a.unit)
    sys.stdout.write(rep.summary_tsv())
    if a.per_utt:
        with open(a.per_utt, "w") as fh:
            fh.write(rep.utterance_tsv())
    for uid in rep.missing_in_hyp:
        print(f"missing_hyp\t{uid}", file=sys.stderr)
    for uid in rep.missing_in_ref:
        print(f"missing_ref\t{uid}", file=sys.stderr)
    return 0 if rep.ok else 2


def parse_grid(text):
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    return [float(x) for x in text.split(",")]


def run_tune(models, examples, param, grid, base_cfg, lm=None):
    """Dev WER/CER per grid value. Returns (rows, best_value)."""
    refs = {e.uid: e.transcript for e in examples}
    rows = []
    for v in grid:
        cfg = DecodeConfig(**{**asdict(base_cfg), param: v})
        res = decode_corpus(models, examples, cfg, lm)
        w = metrics.score_corpus(refs, res.hypotheses, "word").rate
        c = metrics.score_corpus(refs, res.hypotheses, "char").rate
        rows.append((v, w, c))
    best = min(rows, key=lambda r: (r[1], r[2], r[0]))[0]
    return rows, best


def cmd_tune(a):
    param = {"beta": "beta", "lambda": "lam"}[a.param]
    mode = a.mode or ("late" if param == "beta" else "single")
    models = load_decode_models(a.ckpt, mode)
    examples, errors = _decode_inputs(a, models)
    if errors:
        for e in errors:
            print(f"error\t{e}", file=sys.stderr)
        return 1
    lm = _load_lm(a.lm)
    if param == "lam" and lm is None:
        raise ConfigError("tuning lambda needs --lm")
    grid = parse_grid(a.grid)
    rows, best = run_tune(models, examples, param, grid, _decode_cfg(a), lm)
    out = [f"{a.param}\twer\tcer"]
    out += [f"{v:g}\t{w:.6f}\t{c:.6f}" for v, w, c in rows]
    out.append(f"best\t{best:g}")
    text = "\n".join(out) + "\n"
    sys.stdout.write(text)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
    return 0


def cmd_lm_train(a):
    with open(a.text, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n").split("\t")[-1] for ln in fh if ln.strip()]
    lm = lm_train(lines, a.order, a.k)
    lm.save(a.out)
    print(a.out)
    return 0


# ---------------------------------------------------------------- parser

def _decode_flags(p):
    p.add_argument("--ckpt", nargs="+", required=True, help="checkpoint(s); two for late fusion")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mag-feats", dest="mag_feats")
    p.add_argument("--phase-feats", dest="phase_feats")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--beta", type=float, default=0.5, help="late-fusion weight on the first model")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="LM weight")
    p.add_argument("--length-penalty", dest="length_penalty", type=float, default=0.0)
    p.add_argument("--lm", help="NGLM0001 language model")


def build_parser():
    ap = argparse.ArgumentParser(prog="streamfuse", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="synthesise the tone corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=int)
    p.add_argument("--dev", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--alphabet-size", dest="alphabet_size", type=int)
    p.add_argument("--snr-db", dest="snr_db", type=float)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("extract", help="compute feature files for one stream")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stream", choices=frontend.STREAMS, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train", help="train from a key=value config")
    p.add_argument("config")
    p.add_argument("--set", action="append", help="override, e.g. --set epochs=2")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="beam-search a manifest")
    _decode_flags(p)
    p.add_argument("--mode", choices=("single", "late"), default="single")
    p.add_argument("--out", required=True)
    p.add_argument("--nbest")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--report", help="write WER/CER summary against the manifest transcripts")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("score", help="WER/CER of a hypothesis table")
    p.add_argument("--ref", required=True, help="manifest or utt_id<TAB>text table")
    p.add_argument("--hyp", required=True)
    p.add_argument("--unit", choices=("word", "char"), default="word")
    p.add_argument("--per-utt", dest="per_utt")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("tune", help="grid-search beta or lambda on a dev manifest")
    _decode_flags(p)
    p.add_argument("--param", choices=("beta", "lambda"), default="beta")
    p.add_argument("--grid", default="0:1:0.1")
    p.add_argument("--mode", choices=("single", "late"))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("lm-train", help="train the character n-gram LM")
    p.add_argument("--text", required=True, help="transcripts, one per line (manifests accepted)")
    p.add_argument("--order", type=int, default=5)
    p.add_argument("--k", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_lm_train)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, training.DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
