"""Command-line driver.

Subcommands: synth-data, lm-pretrain, train, adapt, decode, score.  Each one
accepts ``--config FILE`` (a JSON object keyed by option name); explicit flags
override config keys, which override built-in defaults.  Every output
directory receives ``config.json`` (the resolved settings) and ``inputs.json``
(content hashes of everything read).  Failures print one JSON line on stderr
and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import numerics as nx
from .decoding import decode_record
from .labels import CC_STRING, ChannelTranscripts, Vocabulary, read_transcripts, record_to_words
from .model import VARIANTS, ModelConfig, Transducer
from .scoring import corpus_report, multitalker_wer, overlap_condition, overlap_ratio
from .synth import (SynthConfig, Synthesizer, derive_rng, read_text, read_utterances, write_text,
                    write_utterances)
from .training import (AdaptConfig, DivergenceError, LMConfig, TrainConfig, Trainer, adapt, lm_nll,
                       pretrain_lm, validation_loss)

log = logging.getLogger("tsotfnt")

TEST_SETS = ("test-general-single", "test-general-mix", "test-shifted-single", "test-shifted-mix")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ bookkeeping

def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> dict:
    files = {}
    for p in paths:
        p = Path(p)
        items = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in items:
            files[str(q)] = git_blob_hash(q)
    combined = hashlib.sha1("".join(f"{h} {n}\n" for n, h in sorted(files.items())).encode()).hexdigest()
    return {"files": files, "hash": combined}


def write_run_info(out: Path, command: str, settings: dict, inputs) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump({"command": command, **settings}, f, indent=2, sort_keys=True, default=str)
    with open(out / "inputs.json", "w", encoding="utf-8") as f:
        json.dump(hash_inputs(inputs), f, indent=2, sort_keys=True)


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    settings = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {args.config} must hold a JSON object")
        for k, v in loaded.items():
            settings[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if k in ("config", "command", "func") or v is None:
            continue
        settings[k] = v
    return settings


def require_paths(**paths) -> None:
    for label, p in paths.items():
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{label}: {p} does not exist")


class MetricsLog:
    def __init__(self, path: Path):
        self.f = open(path, "w", encoding="utf-8")

    def __call__(self, rec: dict) -> None:
        self.f.write(json.dumps(rec, sort_keys=True) + "\n")
        self.f.flush()

    def close(self) -> None:
        self.f.close()


def load_vocab(data: Path) -> Vocabulary:
    return Vocabulary.load(data / "vocab.json")


def load_synth_config(data: Path) -> SynthConfig:
    with open(data / "corpus_config.json", encoding="utf-8") as f:
        return SynthConfig.from_json(json.load(f))


def model_config_for(settings: dict, vocab: Vocabulary, feat_dim: int) -> ModelConfig:
    base = {}
    if settings.get("model_config"):
        with open(settings["model_config"], encoding="utf-8") as f:
            base = json.load(f)
    base.update(variant=settings["variant"], vocab_size=len(vocab), feat_dim=feat_dim)
    return ModelConfig.from_json(base)


def check_vocab(meta: dict, vocab: Vocabulary, what: str) -> None:
    if "vocab" in meta and Vocabulary.from_json(meta["vocab"]) != vocab:
        raise ValueError(f"vocabulary mismatch between {what} and the reference data")


# ---------------------------------------------------------------- commands

def cmd_synth_data(s: dict) -> dict:
    out = Path(s["out"])
    known = set(SynthConfig().to_json())
    cfg = SynthConfig.from_json({k: v for k, v in s.items() if k in known})
    syn = Synthesizer(cfg)
    out.mkdir(parents=True, exist_ok=True)
    syn.vocab.save(out / "vocab.json")
    with open(out / "corpus_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_json(), f, indent=2, sort_keys=True)
    write_utterances(out, "train", syn.single_pool(cfg.n_train, "general", "train"))
    vpool = syn.single_pool(2 * cfg.n_valid, "general", "valid")
    valid = [syn.maybe_mix(vpool, derive_rng(cfg.seed, "valid", "mix", i), f"valid-{i:05d}")
             for i in range(cfg.n_valid)]
    write_utterances(out, "valid", valid)
    for name in TEST_SETS:
        _, dom, kind = name.split("-")
        write_utterances(out, name, syn.test_set(dom, kind == "mix"))
    write_text(out / "text-general.txt", syn.gen_text(cfg.n_text, "general", "text"))
    write_text(out / "text-general-heldout.txt", syn.gen_text(cfg.n_valid, "general", "text-heldout"))
    write_text(out / "text-shifted.txt", syn.gen_text(cfg.n_text, "shifted", "text"))
    write_text(out / "text-shifted-heldout.txt", syn.gen_text(cfg.n_valid, "shifted", "text-heldout"))
    write_run_info(out, "synth-data", {"corpus": cfg.to_json(), "seed": cfg.seed}, [])
    return {"out": str(out), "vocab_size": len(syn.vocab), "n_train": cfg.n_train}


def _lm_model(s: dict, vocab: Vocabulary, feat_dim: int) -> Transducer:
    if s["variant"] == "tsot_baseline":
        raise ValueError("the tsot_baseline variant has no vocabulary predictor to pretrain")
    return Transducer(model_config_for(s, vocab, feat_dim), seed=s["seed"])


def cmd_lm_pretrain(s: dict) -> dict:
    data, out = Path(s["data"]), Path(s["out"])
    require_paths(data=data, model_config=s.get("model_config"))
    vocab, scfg = load_vocab(data), load_synth_config(data)
    texts = read_text(data / "text-general.txt")
    heldout = read_text(data / "text-general-heldout.txt")
    model = _lm_model(s, vocab, scfg.feat_dim)
    lcfg = LMConfig.from_json(s)
    write_run_info(out, "lm-pretrain", s, [data / "text-general.txt", data / "vocab.json"])
    ppl_before = float(np.exp(lm_nll(model, vocab, heldout)))
    metrics = MetricsLog(out / "metrics.jsonl")
    t0 = time.time()
    pretrain_lm(model, vocab, texts, lcfg,
                on_record=lambda r: metrics({**r, "wall_time": round(time.time() - t0, 3)}))
    metrics.close()
    ppl_after = float(np.exp(lm_nll(model, vocab, heldout)))
    nx.save_arrays(out / "lm.ckpt", model.params.state_dict("vocab."),
                   {"kind": "lm", "model_config": model.cfg.to_json(), "vocab": vocab.to_json(),
                    "seed": s["seed"], "perplexity": ppl_after})
    summary = {"perplexity_before": ppl_before, "perplexity": ppl_after, "checkpoint": str(out / "lm.ckpt")}
    _write_json(out / "summary.json", summary)
    return summary


def init_from(model: Transducer, path, prefix: str) -> None:
    """Copy every ``prefix*`` parameter from a checkpoint, all or nothing."""
    arrays, _ = nx.load_arrays(path)
    wanted = model.params.names(prefix)
    sub = {n: a for n, a in arrays.items() if n.startswith(prefix)}
    missing = [n for n in wanted if n not in sub]
    if missing:
        raise nx.CheckpointError(f"{path}: missing {', '.join(missing)}")
    model.params.load_state_dict(sub, strict=False)


def cmd_train(s: dict) -> dict:
    data, out = Path(s["data"]), Path(s["out"])
    require_paths(data=data, init_encoder=s.get("init_encoder"), init_predictor=s.get("init_predictor"),
                  resume=s.get("resume"), model_config=s.get("model_config"))
    if s["variant"] not in VARIANTS:
        raise ValueError(f"unknown variant {s['variant']!r}; expected one of {VARIANTS}")
    vocab, scfg = load_vocab(data), load_synth_config(data)
    syn = Synthesizer(scfg)
    if syn.vocab != vocab:
        raise ValueError("vocab.json does not match the corpus config")
    pool = read_utterances(data, "train", vocab)
    valid = read_utterances(data, "valid", vocab)
    tcfg = TrainConfig.from_json({**s, "lm_weight": s["lambda"]})
    inputs = [data / "train.feats.bin", data / "train.transcripts.jsonl", data / "valid.feats.bin",
              data / "corpus_config.json"] + [Path(s[k]) for k in ("init_encoder", "init_predictor", "resume")
                                               if s.get(k)]
    write_run_info(out, "train", s, inputs)

    if s.get("resume"):
        model, meta, extra = Transducer.load(s["resume"])
        if model.variant != s["variant"]:
            raise ValueError(f"resume checkpoint is {model.variant!r}, not {s['variant']!r}")
        trainer = Trainer(model, syn, pool, tcfg, valid)
        trainer.load_state_arrays(extra)
    else:
        model = Transducer(model_config_for(s, vocab, scfg.feat_dim), seed=s["seed"])
        if s.get("init_encoder"):
            init_from(model, s["init_encoder"], "encoder.")
        if s.get("init_predictor"):
            if not model.is_factorized:
                raise ValueError("--init-predictor needs a factorized variant")
            init_from(model, s["init_predictor"], "vocab.")
        trainer = Trainer(model, syn, pool, tcfg, valid)

    meta = {"vocab": vocab.to_json(), "seed": s["seed"], "variant": s["variant"],
            "train_config": tcfg.to_json()}
    step0 = validation_loss(model, valid, tcfg.lm_weight) if trainer.step == 0 else None
    metrics = MetricsLog(out / "metrics.jsonl")
    if step0 is not None:
        metrics({"step": 0, "valid": step0})

    def on_valid(step, v, improved):
        metrics({"step": step, "valid": v})
        if improved:
            model.save(out / "best.ckpt", meta={**meta, "step": step, "valid": v})

    try:
        trainer.run(on_record=metrics, on_valid=on_valid, until=s.get("stop_after"))
    finally:
        metrics.close()
    model.save(out / "final.ckpt", extra_arrays=trainer.state_arrays(), meta={**meta, "step": trainer.step})
    hist = trainer.history
    summary = {"steps": trainer.step, "final_loss": hist[-1]["loss"] if hist else None,
               "best_valid_loss": trainer.best_valid, "valid_at_start": step0,
               "checkpoint": str(out / "final.ckpt")}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_adapt(s: dict) -> dict:
    out = Path(s["out"])
    text_path = Path(s["text"]) if s.get("text") else Path(s["data"]) / "text-shifted.txt"
    require_paths(model=s["model"], text=text_path)
    model, meta, _ = Transducer.load(s["model"])
    if not model.is_factorized:
        raise ValueError(
            "cannot adapt a tsot_baseline checkpoint: it has no factorized language model, "
            "so text-only adaptation of the vocabulary predictor is undefined"
        )
    vocab = Vocabulary.from_json(meta["vocab"])
    texts = read_text(text_path)
    acfg = AdaptConfig.from_json({**s, "kl_weight": s["omega"]})
    write_run_info(out, "adapt", s, [s["model"], text_path])
    held_path = text_path.with_name(text_path.stem + "-heldout.txt")
    held = read_text(held_path) if held_path.exists() else texts[:100]
    before = lm_nll(model, vocab, held)
    metrics = MetricsLog(out / "metrics.jsonl")
    t0 = time.time()
    if acfg.steps == 0:
        shutil.copyfile(s["model"], out / "adapted.ckpt")
    else:
        adapt(model, vocab, texts, acfg, on_record=lambda r: metrics({**r, "wall_time": round(time.time() - t0, 3)}))
        model.save(out / "adapted.ckpt", meta={**{k: v for k, v in meta.items() if k != "model_config"},
                                               "adapt_config": acfg.__dict__})
    metrics.close()
    after = lm_nll(model, vocab, held)
    summary = {"nll_before": before, "nll_after": after, "steps": acfg.steps,
               "checkpoint": str(out / "adapted.ckpt")}
    _write_json(out / "summary.json", summary)
    return summary


_WORKER: dict = {}


def _worker_init(model_path: str, beam: int) -> None:
    model, meta, _ = Transducer.load(model_path)
    _WORKER.update(model=model, vocab=Vocabulary.from_json(meta["vocab"]), beam=beam)


def _worker_decode(item):
    utt_id, feats = item
    return decode_record(_WORKER["model"], _WORKER["vocab"], utt_id, feats, beam=_WORKER["beam"])


def cmd_decode(s: dict) -> dict:
    data = Path(s["data"])
    out = Path(s["out"])
    require_paths(model=s["model"], data=data)
    if s["beam"] < 0:
        raise ValueError("--beam must be >= 0 (0 selects greedy decoding)")
    model, meta, _ = Transducer.load(s["model"])
    vocab = load_vocab(data)
    check_vocab(meta, vocab, "the model")
    utts = read_utterances(data, s["set"], vocab)
    if s.get("limit"):
        utts = utts[:s["limit"]]
    write_run_info(out, "decode", s, [s["model"], data / f"{s['set']}.feats.bin"])
    items = [(u.utt_id, u.features) for u in utts]
    if s["jobs"] > 1:
        with ProcessPoolExecutor(s["jobs"], initializer=_worker_init, initargs=(s["model"], s["beam"])) as ex:
            records = list(ex.map(_worker_decode, items, chunksize=4))
    else:
        records = [decode_record(model, vocab, i, f, beam=s["beam"]) for i, f in items]
    with open(out / "hyp.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    return {"decoded": len(records), "hyp": str(out / "hyp.jsonl")}


def score_records(hyps: list[dict], refs: list[dict], vocab: Vocabulary | None = None) -> list[dict]:
    by_id = {r["utt_id"]: r for r in hyps}
    missing = [r["utt_id"] for r in refs if r["utt_id"] not in by_id]
    if missing:
        raise ValueError(f"{len(missing)} reference utterances have no hypothesis, e.g. {missing[0]}")
    per_cond: dict[str, list] = {}
    all_reps = []
    single, multi = [], []
    for ref in refs:
        words = record_to_words(ref)
        hyp = by_id[ref["utt_id"]]
        if vocab is not None:
            for tok in hyp["tokens"]:
                if tok != CC_STRING:
                    vocab.lookup(tok)
        speakers: dict[str, list[str]] = {}
        for w in sorted(words, key=lambda w: w.start):
            speakers.setdefault(w.speaker, []).append(w.word)
        channels = ChannelTranscripts([hyp["ch0_text"].split(), hyp["ch1_text"].split()])
        rep = multitalker_wer(list(speakers.values()), channels)
        n_spk = len(speakers)
        cond = overlap_condition(overlap_ratio(words), n_spk)
        per_cond.setdefault(cond, []).append(rep)
        all_reps.append(rep)
        (single if n_spk < 2 else multi).append(rep)
    rows = [{"condition": "overall", "utterances": len(all_reps), **corpus_report(all_reps).to_json()}]
    if single:
        rows.append({"condition": "single-talker", "utterances": len(single), **corpus_report(single).to_json()})
    if multi:
        rows.append({"condition": "multi-talker", "utterances": len(multi), **corpus_report(multi).to_json()})
    for cond in sorted(per_cond):
        rows.append({"condition": cond, "utterances": len(per_cond[cond]), **corpus_report(per_cond[cond]).to_json()})
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'condition':<14} {'utts':>5} {'words':>6} {'sub':>5} {'ins':>5} {'del':>5} {'WER%':>7}"]
    for r in rows:
        wer = "n/a" if r["wer"] is None else f"{100 * r['wer']:.2f}"
        lines.append(f"{r['condition']:<14} {r['utterances']:>5} {r['ref_words']:>6} {r['sub']:>5} "
                     f"{r['ins']:>5} {r['del']:>5} {wer:>7}")
    return "\n".join(lines)


def cmd_score(s: dict) -> dict:
    ref_path = Path(s["ref"]) if s.get("ref") else Path(s["data"]) / f"{s['set']}.transcripts.jsonl"
    require_paths(hyp=s["hyp"], ref=ref_path, vocab=s.get("vocab"))
    with open(s["hyp"], encoding="utf-8") as f:
        hyps = [json.loads(line) for line in f if line.strip()]
    refs = list(read_transcripts(ref_path))
    vocab = Vocabulary.load(s["vocab"]) if s.get("vocab") else None
    rows = score_records(hyps, refs, vocab)
    if s.get("out"):
        out = Path(s["out"])
        write_run_info(out, "score", s, [s["hyp"], ref_path])
        with open(out / "score.jsonl", "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    print(format_table(rows))
    return {"wer": rows[0]["wer"]}


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


# ------------------------------------------------------------------ parser

DEFAULTS = {
    "synth-data": {"seed": 0},
    "lm-pretrain": {"seed": 0, "variant": "integrated", **LMConfig().__dict__},
    "train": {"seed": 0, "variant": "integrated", "lambda": 0.5, **TrainConfig().to_json()},
    "adapt": {"seed": 0, "omega": 1.0, **AdaptConfig().__dict__},
    "decode": {"beam": 16, "jobs": 1},
    "score": {},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsotfnt", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON file of option defaults")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth-data", help="write the synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-valid", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--n-text", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--mix-prob", type=float)
    sp.add_argument("--vocab-size", type=int)

    sp = sub.add_parser("lm-pretrain", help="train the vocabulary predictor on general-domain text")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--model-config")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--peak-lr", type=float)
    sp.add_argument("--warmup", type=int)

    sp = sub.add_parser("train", help="train a transducer")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--model-config")
    sp.add_argument("--lambda", type=float, dest="lambda", help="LM loss weight")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--peak-lr", type=float)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--valid-every", type=int)
    sp.add_argument("--log-every", type=int)
    sp.add_argument("--init-encoder", help="checkpoint to copy encoder.* from")
    sp.add_argument("--init-predictor", help="LM or model checkpoint to copy vocab.* from")
    sp.add_argument("--resume", help="final.ckpt of an earlier run")
    sp.add_argument("--stop-after", type=int, help="stop at this step (schedule still spans --steps)")

    sp = sub.add_parser("adapt", help="text-only adaptation of the vocabulary predictor")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="one sentence per line")
    src.add_argument("--data", help="corpus directory; uses text-shifted.txt")
    sp.add_argument("--omega", type=float, help="KL weight")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--peak-lr", type=float)

    sp = sub.add_parser("decode", help="decode a test set")
    common(sp, seed=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--set", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--beam", type=int, help="beam width, 0 for greedy (default 16)")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--limit", type=int)

    sp = sub.add_parser("score", help="score decoder output against reference transcripts")
    common(sp, seed=False)
    sp.add_argument("--hyp", required=True)
    ref = sp.add_mutually_exclusive_group(required=True)
    ref.add_argument("--ref", help="transcripts jsonl")
    ref.add_argument("--data", help="corpus directory (with --set)")
    sp.add_argument("--set")
    sp.add_argument("--vocab")
    sp.add_argument("--out")
    return p


COMMANDS = {
    "synth-data": cmd_synth_data,
    "lm-pretrain": cmd_lm_pretrain,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "decode": cmd_decode,
    "score": cmd_score,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        settings = resolve(args, DEFAULTS[args.command])
        if args.command == "score" and settings.get("data") and not settings.get("set"):
            raise UsageError("--data needs --set")
        summary = COMMANDS[args.command](settings)
    except UsageError as e:
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return 2
    except (DivergenceError, nx.CheckpointError, FileNotFoundError, ValueError, KeyError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    if args.command != "score":
        print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
