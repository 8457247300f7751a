"""Command-line entry point.

Subcommands: train, eval, gradcheck, ablate, probe, timing. Settings are
resolved in three layers, later winning: built-in defaults, a TOML or
JSON config file (--config), then command-line flags (--set key=value
plus the dedicated flags). Every run writes a resolved_config.json next
to its outputs so it can be reproduced exactly; nothing is written
outside the output directory.

Exit codes: 0 success, 1 usage/validation error, 2 numerical failure
(non-finite loss, failed gradient check, violated state bound).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, data, engine, experiments, kernels
from .cells import GateMask
from .engine import TrainConfig
from .model import Model, ModelConfig
from .numeric import Rng, ShapeError

try:
    import tomllib  # py >= 3.11
except ImportError:  # pragma: no cover
    import tomli as tomllib

OUT_ENV_VAR = "LTMLAB_OUT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class CliError(ValueError):
    pass


def _default_out() -> str:
    return os.environ.get(OUT_ENV_VAR, "out")


def _default_settings() -> dict:
    model = ModelConfig().to_dict()
    model["embed_dim"] = None  # None means "match hidden"
    return {
        "model": model,
        "train": TrainConfig().to_dict(),
        "data": {"corpus": None, "level": "char", "cap": None},
    }


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    raw = p.read_bytes()
    if p.suffix.lower() == ".json":
        return json.loads(raw.decode("utf-8"))
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError:
        try:
            return json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError:
            raise CliError(f"config file {p} is neither valid TOML nor JSON") from None


def _merge(base: dict, update: dict, path: str = "") -> None:
    for k, v in update.items():
        here = f"{path}.{k}" if path else k
        if k not in base:
            raise CliError(f"unknown config key: {here}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, here)
        else:
            base[k] = v


def _apply_set(settings: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise CliError(f"--set expects key=value, got {assignment!r}")
    key, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = settings
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise CliError(f"unknown config key: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise CliError(f"unknown config key: {key}")
    node[parts[-1]] = value


def _resolve_settings(args) -> dict:
    settings = _default_settings()
    if getattr(args, "config", None):
        _merge(settings, _load_config_file(args.config))
    for assignment in getattr(args, "set", None) or []:
        _apply_set(settings, assignment)
    # dedicated flags win over file and --set
    if getattr(args, "corpus", None):
        settings["data"]["corpus"] = args.corpus
    if getattr(args, "level", None):
        settings["data"]["level"] = args.level
    if getattr(args, "cap", None) is not None:
        settings["data"]["cap"] = args.cap
    if getattr(args, "cell", None):
        settings["model"]["cell_kind"] = args.cell
    if getattr(args, "epochs", None) is not None:
        settings["train"]["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        settings["train"]["seed"] = args.seed
    if settings["model"]["embed_dim"] is None:
        settings["model"]["embed_dim"] = settings["model"]["hidden"]
    return settings


def _load_corpus_from(settings: dict) -> data.Corpus:
    d = settings["data"]
    corpus_dir = d["corpus"] or data.desk_corpus_dir()
    return data.load_corpus(corpus_dir, d["level"], d["cap"])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(out: Path, command: str, settings: dict,
                    corpus: data.Corpus | None = None, **extra) -> None:
    snap = {
        "command": command,
        "version": __version__,
        "backend": kernels.active_backend(),
        "settings": settings,
    }
    if corpus is not None:
        snap["corpus"] = {"source": corpus.source,
                          "content_hash": corpus.content_hash,
                          "vocab_size": corpus.vocab.size}
    snap.update(extra)
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"expected a comma-separated integer list, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    settings = _resolve_settings(args)
    out = _out_dir(args)
    corpus = _load_corpus_from(settings)
    settings["model"]["vocab"] = corpus.vocab.size
    mcfg = ModelConfig.from_dict(settings["model"])
    tcfg = TrainConfig.from_dict(settings["train"])
    tcfg.validate()
    mcfg.validate()
    _write_snapshot(out, "train", settings, corpus)

    model = Model.init(mcfg, Rng(tcfg.seed).child("model-init"))
    report_path = out / "reports.jsonl"
    with open(report_path, "w") as fh:
        def sink(report: dict) -> None:
            fh.write(json.dumps(report) + "\n")
            fh.flush()
            print(f"epoch {report['epoch']:3d} {report['split']:5s} "
                  f"nll={report['nll']:.4f} ppl={report['ppl']:.3f} "
                  f"bpc={report['bpc']:.4f} ({report['seconds']:.1f}s)")
        ckpt = engine.train(model, corpus, tcfg, sink)
    ckpt_path = out / "checkpoint.ltmc"
    ckpt.save(ckpt_path)
    test_m = engine.evaluate(model, corpus.test, batch_size=tcfg.batch_size,
                             bptt_len=tcfg.bptt_len)
    print(json.dumps({"checkpoint": str(ckpt_path), "test_nll": test_m.nll_mean,
                      "test_ppl": test_m.perplexity, "test_bpc": test_m.bpc}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    settings = _resolve_settings(args)
    out = _out_dir(args)
    ckpt = checkpoint.Checkpoint.load(args.checkpoint)
    model = engine.model_from_checkpoint(ckpt)
    corpus = _load_corpus_from(settings)
    if corpus.vocab.size != model.cfg.vocab:
        raise CliError(
            f"corpus vocabulary ({corpus.vocab.size}) does not match the "
            f"checkpoint ({model.cfg.vocab}); use the training corpus/level/cap")
    _write_snapshot(out, "eval", settings, corpus, checkpoint=str(args.checkpoint),
                    split=args.split)
    metrics = engine.evaluate(model, corpus.split(args.split))
    line = {"split": args.split, "nll": metrics.nll_mean,
            "perplexity": metrics.perplexity, "bpc": metrics.bpc,
            "tokens": metrics.tokens}
    with open(out / "eval.json", "w") as fh:
        json.dump(line, fh, indent=2)
        fh.write("\n")
    print(json.dumps(line))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    settings = _resolve_settings(args)
    out = _out_dir(args)
    _write_snapshot(out, "gradcheck", settings)
    kinds = ("ltm", "lstm", "gru", "rnn") if args.cell == "all" else (args.cell,)
    seed0 = settings["train"]["seed"]
    reports = []
    ok = True
    for kind in kinds:
        for s in range(args.seeds):
            rep = experiments.gradcheck(kind, d=args.d, T=args.T,
                                        vocab=args.vocab, layers=args.layers,
                                        seed=seed0 + s)
            reports.append(rep)
            ok = ok and rep.passed
            print(f"{kind:5s} seed={rep.seed:<3d} max_rel_err={rep.max_rel_err:.3e} "
                  f"worst={rep.worst_param} "
                  f"{'ok' if rep.passed else 'FAIL'}")
    with open(out / "gradcheck.json", "w") as fh:
        json.dump([rep.__dict__ for rep in reports], fh, indent=2)
        fh.write("\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_ablate(args) -> int:
    settings = _resolve_settings(args)
    out = _out_dir(args)
    corpus = _load_corpus_from(settings)
    _write_snapshot(out, "ablate", settings, corpus,
                    seeds=_parse_int_list(args.seeds), hidden=args.hidden,
                    layers=args.layers)
    tcfg = TrainConfig.from_dict(settings["train"])
    plan = experiments.AblationPlan(
        seeds=_parse_int_list(args.seeds), hidden=args.hidden,
        layers=args.layers, train=tcfg)

    def progress(done, total):
        print(f"\rablation {done}/{total} runs", end="", flush=True)

    rows = experiments.run_ablation(corpus, plan, jobs=args.jobs,
                                    progress=progress)
    print()
    experiments.write_ablation_csv(rows, out / "ablation.csv")
    experiments.write_ablation_json(rows, out / "ablation.json")
    for r in rows:
        print(f"{r.label:40s} mean_ppl={r.mean_ppl:10.3f} std={r.std_ppl:8.3f}")
    best = min(rows, key=lambda r: r.mean_ppl)
    print(f"lowest mean perplexity: {best.label}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    settings = _resolve_settings(args)
    out = _out_dir(args)
    _write_snapshot(out, "probe", settings, cell=args.cell,
                    horizons=_parse_int_list(args.horizons), gain=args.gain)
    results = experiments.stability_probe(
        args.cell, _parse_int_list(args.horizons),
        seed=settings["train"]["seed"], d=args.d, gain=args.gain)
    experiments.write_probe_csv(results, out / "probe.csv")
    experiments.write_probe_json(results, out / "probe.json")
    for r in results:
        print(f"T={r.horizon:<6d} |dL/dx1|={r.grad_x1_norm:.3e} "
              f"|dL/dparams|={r.grad_param_norm:.3e} "
              f"state=[{r.state_min:.4f}, {r.state_max:.4f}] nan={r.nan_seen}")
    return EXIT_OK


def _cmd_timing(args) -> int:
    settings = _resolve_settings(args)
    out = _out_dir(args)
    corpus = _load_corpus_from(settings)
    _write_snapshot(out, "timing", settings, corpus,
                    lengths=_parse_int_list(args.lengths))
    rows = experiments.timing_sweep(
        corpus, _parse_int_list(args.lengths), hidden=args.hidden,
        layers=args.layers, batch_size=args.batch_size,
        seed=settings["train"]["seed"], repeats=args.repeats)
    experiments.write_timing_csv(rows, out / "timing.csv")
    experiments.write_timing_json(rows, out / "timing.json")
    for r in rows:
        print(f"len={r.seq_len:<6d} train={r.train_seconds:8.2f}s "
              f"eval={r.eval_seconds:6.2f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=_default_out(),
                        help=f"output directory (default ${OUT_ENV_VAR} or ./out)")
    common.add_argument("--config", help="TOML or JSON settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a settings key (dotted path)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker threads for grid experiments")

    corpus_opts = argparse.ArgumentParser(add_help=False)
    corpus_opts.add_argument("--corpus", help="corpus directory (default: bundled)")
    corpus_opts.add_argument("--level", choices=data.LEVELS)
    corpus_opts.add_argument("--cap", type=int, help="max vocabulary size")

    p = _Parser(prog="ltmlab", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("train", parents=[common, corpus_opts],
                        help="train a model and write a checkpoint")
    pt.add_argument("--cell", choices=("ltm", "lstm", "gru", "rnn"))
    pt.add_argument("--epochs", type=int)
    pt.set_defaults(fn=_cmd_train)

    pe = sub.add_parser("eval", parents=[common, corpus_opts],
                        help="evaluate a checkpoint on a split")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--split", choices=("train", "valid", "test"), default="test")
    pe.set_defaults(fn=_cmd_eval)

    pg = sub.add_parser("gradcheck", parents=[common],
                        help="verify gradients against finite differences")
    pg.add_argument("--cell", default="all",
                    choices=("ltm", "lstm", "gru", "rnn", "all"))
    pg.add_argument("--d", type=int, default=4)
    pg.add_argument("--T", type=int, default=8)
    pg.add_argument("--vocab", type=int, default=6)
    pg.add_argument("--layers", type=int, default=1)
    pg.add_argument("--seeds", type=int, default=1,
                    help="number of consecutive seeds to check")
    pg.set_defaults(fn=_cmd_gradcheck)

    pa = sub.add_parser("ablate", parents=[common, corpus_opts],
                        help="run the 13-row gate ablation sweep")
    pa.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    pa.add_argument("--hidden", type=int, default=64)
    pa.add_argument("--layers", type=int, default=2)
    pa.set_defaults(fn=_cmd_ablate)

    pp = sub.add_parser("probe", parents=[common],
                        help="long-horizon gradient/state stability probe")
    pp.add_argument("--cell", default="ltm",
                    choices=("ltm", "lstm", "gru", "rnn"))
    pp.add_argument("--horizons", default="50,100,300,1000")
    pp.add_argument("--d", type=int, default=64)
    pp.add_argument("--gain", type=float,
                    help="recurrent init gain (variance gain^2/fan_in)")
    pp.set_defaults(fn=_cmd_probe)

    pm = sub.add_parser("timing", parents=[common, corpus_opts],
                        help="wall-clock sweep over window lengths")
    pm.add_argument("--lengths", default=",".join(map(str, experiments.STANDARD_LENGTHS)))
    pm.add_argument("--hidden", type=int, default=64)
    pm.add_argument("--layers", type=int, default=2)
    pm.add_argument("--batch-size", type=int, default=32)
    pm.add_argument("--repeats", type=int, default=1)
    pm.set_defaults(fn=_cmd_timing)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (engine.NonFiniteLossError, experiments.GradcheckFailure,
            experiments.ProbeBoundViolation) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CliError, data.CorpusError, checkpoint.CheckpointError, ShapeError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def console_main() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    console_main()
