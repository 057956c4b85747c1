"""Command-line interface: ``gatedcnn-nci <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files, hash mismatch), 3 numerical failure (divergence, failed grad check).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics, model, pipeline, synth, text, training
from . import tensor as T
from .model import Model, ModelConfig
from .training import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_METRICS = ("macro_auc", "micro_auc", "macro_f1", "micro_f1", "p_at_k")
GRADCHECK_TOLERANCE = 1e-4

logger = logging.getLogger("gatedcnn_nci")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- configuration ----------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise text.DataError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise text.DataError(f"{path}: malformed JSON config ({exc})") from None
    if not isinstance(obj, dict):
        raise text.DataError(f"{path}: config must be a JSON object")
    return obj


def _section(cfg: dict, name: str, cls) -> dict:
    section = dict(cfg.get(name, {}))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return section


def _train_config(args, cfg: dict) -> TrainConfig:
    kw = _section(cfg, "train", TrainConfig)
    for flag, key in (("lr", "lr"), ("epochs", "max_epochs"), ("patience", "patience"), ("k", "k"), ("threshold", "threshold"), ("seed", "seed"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    return TrainConfig(**kw)


def _model_config(args, cfg: dict, corpus: pipeline.Corpus, d_e: int | None) -> ModelConfig:
    kw = _section(cfg, "model", ModelConfig)
    kw.pop("vocab_size", None)
    kw.pop("n_codes", None)
    if d_e is not None:
        if "d_e" in kw and kw["d_e"] != d_e:
            raise UsageError(f"config d_e={kw['d_e']} but the embeddings have {d_e} columns")
        kw["d_e"] = d_e
    if getattr(args, "max_len", None) is not None:
        kw["max_len"] = args.max_len
    if "dilations" in kw:
        kw["dilations"] = tuple(kw["dilations"])
    return ModelConfig(vocab_size=len(corpus.vocab), n_codes=len(corpus.codes), **kw)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- data helpers -----------------------------------------------------------


def _load_embeddings(path, corpus: pipeline.Corpus) -> np.ndarray | None:
    if path is None:
        return None
    return text.load_embeddings(path, corpus.vocab).matrix


def _load_model(checkpoint, corpus: pipeline.Corpus) -> Model:
    config, params, _ = model.load_checkpoint(checkpoint, corpus.vocab.digest(), corpus.codes.digest())
    return Model(config, params, corpus.groups())


def _split(corpus: pipeline.Corpus, name: str) -> list[text.NoteRecord]:
    if name not in corpus.splits:
        raise text.DataError(f"split {name!r} not found; available: {sorted(corpus.splits)}")
    return corpus.splits[name]


def _gold(notes, n_codes: int) -> np.ndarray:
    gold = np.zeros((len(notes), n_codes), dtype=np.int8)
    for r, note in enumerate(notes):
        gold[r, list(note.code_ids)] = 1
    return gold


def _read_scores(path, notes, codes: text.CodeSet) -> np.ndarray:
    """Score rows from a JSONL file of ``{"id", "scores": {code: p}}`` or ``{"id", "scores": [p, ...]}``."""
    by_id = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                raw = obj["scores"]
                if isinstance(raw, dict):
                    row = np.zeros(len(codes))
                    for code, p in raw.items():
                        row[codes.code_to_id[code]] = float(p)
                else:
                    row = np.asarray(raw, dtype=np.float64)
                    if row.shape != (len(codes),):
                        raise ValueError(f"expected {len(codes)} scores, got {row.size}")
                by_id[str(obj["id"])] = row
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise text.DataError(f"{path}:{lineno}: bad score record ({exc})") from None
    missing = [n.id for n in notes if n.id not in by_id]
    if missing:
        raise text.DataError(f"{path}: no scores for {len(missing)} note(s), e.g. {missing[0]!r}")
    return np.stack([by_id[n.id] for n in notes])


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    kw = _section(_load_config(args.config), "synth", synth.SynthSpec)
    for flag in ("vocab_size", "n_codes", "noise_rate", "triggers_per_code", "plant_prob"):
        if getattr(args, flag) is not None:
            kw[flag] = getattr(args, flag)
    if args.notes_per_split is not None:
        kw["notes_per_split"] = tuple(args.notes_per_split)
    if args.seed is not None:
        kw["seed"] = args.seed
    spec = synth.SynthSpec.from_json(kw)
    data = synth.generate(spec)
    paths = synth.write(data, args.out)
    _write_json(Path(args.out) / "triggers.json", data.triggers)
    _emit({"spec": dataclasses.asdict(spec), "files": {k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def _raw_inputs(args) -> tuple[dict[str, list[dict]], dict[str, str]]:
    paths = {}
    if args.data is not None:
        root = Path(args.data)
        paths = {s: root / f"{s}.jsonl" for s in synth.SPLITS if (root / f"{s}.jsonl").exists()}
    for split in synth.SPLITS:
        if getattr(args, split) is not None:
            paths[split] = Path(getattr(args, split))
    codes = args.codes or (Path(args.data) / "codes.tsv" if args.data else None)
    if "train" not in paths:
        raise UsageError("preprocess needs a train split (--train or --data DIR containing train.jsonl)")
    if codes is None:
        raise UsageError("preprocess needs --codes (or --data DIR containing codes.tsv)")
    for p in [*paths.values(), Path(codes)]:
        if not p.exists():
            raise text.DataError(f"{p}: file not found")
    return {s: text.read_notes(p) for s, p in paths.items()}, text.read_code_descriptions(codes)


def cmd_preprocess(args) -> int:
    raw, descriptions = _raw_inputs(args)
    corpus = pipeline.preprocess(
        raw,
        descriptions,
        min_doc_count=args.min_doc_count if args.min_doc_count is not None else text.DEFAULT_MIN_DOC_COUNT,
        max_len=args.max_len if args.max_len is not None else text.DEFAULT_MAX_LEN,
    )
    pipeline.save_corpus(corpus, args.out)
    _emit(corpus.stats())
    return EXIT_OK


def cmd_train_embeddings(args) -> int:
    corpus = pipeline.load_corpus(args.data)
    cbow = dict(_load_config(args.config).get("cbow", {}))
    for flag in ("dim", "window", "negatives", "epochs"):
        if getattr(args, flag) is not None:
            cbow[flag] = getattr(args, flag)
    seed = args.seed if args.seed is not None else 0
    docs = [list(n.token_ids) for n in _split(corpus, "train")]
    history: list[float] = []
    table = text.train_cbow(
        docs,
        d_e=cbow.get("dim", 100),
        window=cbow.get("window", 5),
        negatives=cbow.get("negatives", 5),
        epochs=cbow.get("epochs", 5),
        seed=training.derive_seed(seed, "cbow"),
        vocab_size=len(corpus.vocab),
        history=history,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text.save_embeddings(out, table, corpus.vocab)
    _emit({"out": str(out), "shape": list(table.matrix.shape), "loss_per_epoch": history})
    return EXIT_OK


def _train_run(args):
    cfg = _load_config(args.config)
    corpus = pipeline.load_corpus(args.data)
    emb = _load_embeddings(args.embeddings, corpus)
    mcfg = _model_config(args, cfg, corpus, None if emb is None else emb.shape[1])
    return corpus, emb, mcfg, _train_config(args, cfg)


def _save_run(out: Path, result: training.TrainResult, corpus, run: TrainConfig, name: str = "model") -> str:
    out.mkdir(parents=True, exist_ok=True)
    digest = model.save_checkpoint(
        out / f"{name}.ckpt",
        result.model.config,
        result.model.params,
        corpus.vocab.digest(),
        corpus.codes.digest(),
        {"train": run.to_json(), "best_epoch": result.best_epoch, "best_dev_micro_f1": result.best_dev_micro_f1},
    )
    with open(out / f"{name}.log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return digest


def cmd_train(args) -> int:
    corpus, emb, mcfg, run = _train_run(args)
    start = time.perf_counter()
    result = training.train(mcfg, _split(corpus, "train"), _split(corpus, "dev"), corpus.groups(), run, emb)
    digest = _save_run(Path(args.out), result, corpus, run)
    _emit({
        "checkpoint": str(Path(args.out) / "model.ckpt"),
        "sha256": digest,
        "best_epoch": result.best_epoch,
        "best_dev_micro_f1": result.best_dev_micro_f1,
        "epochs_run": len(result.log),
        "seconds": round(time.perf_counter() - start, 1),
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = pipeline.load_corpus(args.data)
    notes = _split(corpus, args.split)
    k = args.k if args.k is not None else 5
    threshold = args.threshold if args.threshold is not None else 0.5
    if (args.checkpoint is None) == (args.scores is None):
        raise UsageError("eval needs exactly one of --checkpoint or --scores")
    if args.checkpoint is not None:
        scores = _load_model(args.checkpoint, corpus).predict_proba([n.token_ids for n in notes])
    else:
        scores = _read_scores(args.scores, notes, corpus.codes)
    report = metrics.evaluate(metrics.PredictionSet(scores, _gold(notes, len(corpus.codes))), k=k, threshold=threshold)
    report["split"] = args.split
    if args.out:
        _write_json(Path(args.out), report)
    _emit(report)
    return EXIT_OK


def cmd_predict(args) -> int:
    corpus = pipeline.load_corpus(args.data)
    notes = _split(corpus, args.split)
    mdl = _load_model(args.checkpoint, corpus)
    k = args.k if args.k is not None else 5
    scores = mdl.predict_proba([n.token_ids for n in notes])
    top = metrics.top_k(scores, min(k, mdl.config.n_codes))
    lines = []
    for note, row, idx in zip(notes, scores, top):
        lines.append(json.dumps({"id": note.id, "codes": [{"code": corpus.codes.codes[j], "score": float(row[j])} for j in idx]}))
    body = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)
    return EXIT_OK


def gradcheck_report(n_tokens: int, n_codes: int, seed: int, variants=model.VARIANTS) -> dict:
    """Finite-difference check of every parameter of a small randomised model per variant."""
    report = {}
    for variant in variants:
        rng = training.derive_rng(seed, f"gradcheck/{variant}")
        cfg = ModelConfig(vocab_size=40, n_codes=n_codes, d_e=6, d_g=2, kernel_size=3, n_layers=2, dropout=0.0, variant=variant)
        params = model.init_params(cfg, rng)
        for p in params:
            # randomise the zero-initialised head so every path carries gradient
            p.values[...] = rng.normal(scale=0.5, size=p.shape)
            p.requires_grad = True
        groups = [tuple(int(t) for t in rng.integers(0, cfg.vocab_size, size=2)) for _ in range(n_codes)]
        mdl = Model(cfg, params, groups)
        ids = rng.integers(0, cfg.vocab_size, size=n_tokens)
        gold = set(int(j) for j in np.flatnonzero(rng.random(n_codes) < 0.5))
        errs = T.grad_check(lambda: mdl.loss(ids, gold), list(params), seed=seed)
        report[variant] = dict(zip(params.names(), errs))
    return report


def cmd_gradcheck(args) -> int:
    if args.tokens < 1 or args.codes < 1:
        raise UsageError("--tokens and --codes must be >= 1")
    report = gradcheck_report(args.tokens, args.codes, args.seed if args.seed is not None else 0)
    worst = max(e for per in report.values() for e in per.values())
    _emit({"max_rel_err": worst, "tolerance": GRADCHECK_TOLERANCE, "per_parameter": report})
    if not worst < GRADCHECK_TOLERANCE:
        raise NumericalFailure(f"gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE}")
    return EXIT_OK


ABLATION_ROWS = (("full", "GatedCNN-NCI"), ("no_nci", "w/o NCI"), ("no_gating", "w/o gating"))


def format_ablation_table(rows: list[dict], k: int) -> str:
    header = ["Model", "Macro-AUC", "Micro-AUC", "Macro-F1", "Micro-F1", f"P@{k}"]
    body = [[r["model"]] + ["-" if r[m] is None else f"{100 * r[m]:.1f}" for m in REPORT_METRICS] for r in rows]
    widths = [max(len(str(line[i])) for line in [header, *body]) for i in range(len(header))]
    fmt = lambda cells: "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"  # noqa: E731
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt(header), sep, *(fmt(b) for b in body)])


def cmd_ablate(args) -> int:
    corpus, emb, mcfg, run = _train_run(args)
    notes = _split(corpus, args.split)
    out = Path(args.out)
    rows = []
    for variant, label in ABLATION_ROWS:
        cfg = model.ablate(variant, mcfg)
        result = training.train(cfg, _split(corpus, "train"), _split(corpus, "dev"), corpus.groups(), run, emb)
        digest = _save_run(out, result, corpus, run, name=variant)
        report = training.evaluate_model(result.model, notes, run.k, run.threshold)
        rows.append({
            "variant": variant,
            "model": label,
            **{m: report[m] for m in REPORT_METRICS},
            "best_dev_micro_f1": result.best_dev_micro_f1,
            "best_epoch": result.best_epoch,
            "param_count": result.model.params.count(),
            "sha256": digest,
        })
    table = format_ablation_table(rows, run.k)
    _write_json(out / "ablation.json", {"split": args.split, "k": run.k, "rows": rows})
    (out / "ablation.md").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_search(args) -> int:
    corpus, emb, mcfg, run = _train_run(args)
    if args.budget < 1 or args.epochs_per_trial < 1:
        raise UsageError("--budget and --epochs-per-trial must be >= 1")
    result = training.random_search(
        training.SearchSpace(),
        args.budget,
        args.epochs_per_trial,
        run.seed,
        mcfg,
        _split(corpus, "train"),
        _split(corpus, "dev"),
        corpus.groups(),
        run,
        emb,
        include_base=args.include_base,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(result.trials[0])
    with open(out / "trials.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(result.trials)
    best_cfg = training.trial_config(mcfg, result.best) if result.best["trial"] or not args.include_base else mcfg
    best = {
        "model": {k: v for k, v in best_cfg.to_json().items() if k not in ("vocab_size", "n_codes")},
        "train": dataclasses.replace(run, lr=result.best["lr"]).to_json(),
        "dev_micro_f1": result.best["dev_micro_f1"],
        "trial": result.best["trial"],
    }
    _write_json(out / "best_config.json", best)
    _emit(best)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatedcnn-nci", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *, config=True, seed=True):
        if config:
            p.add_argument("--config", metavar="PATH", help="JSON config with optional synth/cbow/model/train sections")
        if seed:
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic corpus"))
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--n-codes", type=int)
    p.add_argument("--notes-per-split", type=int, nargs=3, metavar=("TRAIN", "DEV", "TEST"))
    p.add_argument("--triggers-per-code", type=int)
    p.add_argument("--plant-prob", type=float)
    p.add_argument("--noise-rate", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="tokenize, build the vocabulary and encode notes")
    p.add_argument("--data", help="directory with {train,dev,test}.jsonl and codes.tsv")
    for split in synth.SPLITS:
        p.add_argument(f"--{split}", metavar="JSONL")
    p.add_argument("--codes", metavar="TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--min-doc-count", type=int)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = common(sub.add_parser("train-embeddings", help="CBOW word embeddings on the train split"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="embedding text file")
    p.add_argument("--dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_embeddings)

    def trainer(p):
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--embeddings")
        p.add_argument("--out", required=True)
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--threshold", type=float)
        p.add_argument("--max-len", type=int)
        return p

    trainer(sub.add_parser("train", help="train a model")).set_defaults(func=cmd_train)

    p = trainer(sub.add_parser("ablate", help="train full, no_nci and no_gating under one config"))
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_ablate)

    p = trainer(sub.add_parser("search", help="random hyper-parameter search"))
    p.add_argument("--budget", type=int, default=8)
    p.add_argument("--epochs-per-trial", type=int, default=3)
    p.add_argument("--include-base", action="store_true", help="make trial 0 the configured model")
    p.set_defaults(func=cmd_search)

    for name, helptext in (("eval", "metrics report for a split"), ("predict", "top-k codes per note as JSONL")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--split", default="test")
        p.add_argument("--k", type=int)
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--scores", help="JSONL of precomputed scores instead of a checkpoint")
            p.add_argument("--threshold", type=float)
            p.set_defaults(func=cmd_eval)
        else:
            p.set_defaults(func=cmd_predict)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the full model and ablations"), config=False)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--codes", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "command", None) == "predict" and args.checkpoint is None:
        print("gatedcnn-nci predict: error: --checkpoint is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gatedcnn-nci {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.TrainingDiverged as exc:
        print(f"gatedcnn-nci {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalFailure as exc:
        print(f"gatedcnn-nci {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (text.DataError, model.CheckpointError, model.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"gatedcnn-nci {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
