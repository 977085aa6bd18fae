"""Command-line entry point: ``python -m semid <command> [--config FILE]``.

Commands run one stage each (``synth``, ``quantize``, ``assign``, ``train``,
``eval``, ``report``, ``gradcheck``) or all of them in order (``pipeline``).
Artifacts go under the output directory only; progress is logged to stderr
as one JSON object per line. On failure a JSON error object is logged and
the process exits with a code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import parallel, quantizers, synth
from .config import ConfigError, RunConfig, load_config
from .data import DataFormatError, EmbeddingMatrix, load_embeddings, load_interactions
from .experiment import ExperimentConfig, make_index, model_config, prepare, run_variant
from .mcca import encode_samples, init_params, load_params, save_params
from .metrics import permutation_pvalue, report, save_metrics, evaluate
from .pipeline import build_joint, load_bundle, quantize_all, save_bundle
from .trainer import NonFiniteGradient, gradient_check, save_loss_log, train

COMMANDS = ("synth", "quantize", "assign", "train", "eval", "report", "gradcheck", "pipeline")
EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "unknown_command": 2,
    "invalid_config": 3,
    "missing_artifact": 4,
    "data_error": 5,
    "gradcheck_failed": 6,
    "diverged": 7,
}

log = logging.getLogger("semid")


class CliError(Exception):
    def __init__(self, code: str, message: str, **detail):
        super().__init__(message)
        self.code = code
        self.detail = detail


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        body = {"level": record.levelname.lower(), "event": record.getMessage()}
        body.update(getattr(record, "fields", {}))
        return json.dumps(body, sort_keys=True, default=str)


def _event(name: str, level=logging.INFO, **fields):
    log.log(level, name, extra={"fields": fields})


def _setup_logging(stream=None):
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(_JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)
    log.propagate = False


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("missing_artifact", f"missing {what}: {path}", path=str(path))
    return path


def _dir(cfg: RunConfig, stage: str) -> Path:
    d = Path(cfg.paths.out) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_run_record(cfg: RunConfig, stage: str, sections: tuple[str, ...]) -> None:
    """Stage config and hashes next to the stage's artifacts (paths excluded)."""
    d = cfg.to_dict()
    rec = {
        "stage": stage,
        "config_hash": cfg.hash,
        "stage_hash": cfg.stage_hash(*sections),
        "config": {s: d[s] for s in sections},
    }
    path = _dir(cfg, stage) / "run.json"
    path.write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _embeddings(cfg: RunConfig) -> tuple[EmbeddingMatrix, EmbeddingMatrix | None]:
    p = cfg.paths
    Xt = load_embeddings(_require(p.input("textual"), "textual embeddings"))
    audio = p.input("audio")
    if p.audio is not None:
        _require(audio, "audio embeddings")
    Xa = load_embeddings(audio) if audio.exists() else None
    return Xt, Xa


def _interactions(cfg: RunConfig, split: str):
    return load_interactions(_require(cfg.paths.input(split), f"{split} interactions"), split)


def _bundle_path(cfg: RunConfig) -> Path:
    return Path(cfg.paths.out) / "bundle" / "manifest.json"


# stages


def cmd_synth(cfg: RunConfig) -> dict:
    data = synth.generate(cfg.synth)
    paths = synth.write(data, cfg.paths.data_dir)
    _write_run_record(cfg, "data", ("synth",))
    _event("synth.done", items=len(data.textual), train_events=len(data.train),
           test_events=len(data.test), planted_cold=len(data.cold_items))
    return {k: str(v) for k, v in paths.items()}


def _missing_items(cfg: RunConfig, catalog: set[int]) -> list[int]:
    seen: set[int] = set()
    for split in ("train", "test"):
        path = cfg.paths.input(split)
        if path.exists():
            seen |= load_interactions(path, split).item_ids
    return sorted(seen - catalog)


def _stream_matrices(Xt, Xa, normalize: bool) -> dict:
    joint = build_joint(Xt, *([Xa] if Xa is not None else []), normalize=normalize)
    return {"textual": Xt, "audio": Xa, "joint": joint}


def cmd_quantize(cfg: RunConfig) -> dict:
    Xt, Xa = _embeddings(cfg)
    q = cfg.quantize
    streams = tuple(s for s in q.streams if s != "audio" or Xa is not None)
    if "audio" in q.streams and Xa is None:
        _event("quantize.audio_absent", logging.WARNING, note="joint stream equals textual")
    bundle = quantize_all(Xt, Xa, q.quantize_config(), streams=streams)
    bundle.missing_items = _missing_items(cfg, set(Xt.item_ids.tolist()))
    if bundle.missing_items:
        _event("quantize.items_without_embeddings", logging.WARNING,
               count=len(bundle.missing_items), items=bundle.missing_items[:20])
    manifest = save_bundle(bundle, _dir(cfg, "bundle"))
    _write_run_record(cfg, "bundle", ("quantize",))
    mats = _stream_matrices(Xt, Xa, q.normalize)
    for s in bundle.streams:
        _event("quantize.stream", stream=s, method=q.method, k=q.k,
               recon_mse=quantizers.recon_error(mats[s], bundle.codebooks[s]))
    return {"manifest": str(manifest), "config_hash": bundle.hash}


def cmd_assign(cfg: RunConfig) -> dict:
    bundle = load_bundle(_require(_bundle_path(cfg), "semantic-ID bundle"))
    Xt, Xa = _embeddings(cfg)
    mats = _stream_matrices(Xt, Xa, bundle.config.normalize)
    out = _dir(cfg, "assign")
    written = {}
    for s in bundle.streams:
        if mats[s] is None:
            raise CliError("missing_artifact", f"bundle has a {s} stream but no {s} embeddings were given")
        table = quantizers.assign(mats[s], bundle.codebooks[s])
        path = out / f"{s}-{bundle.hash[:12]}.tsv"
        quantizers.save_table(table, path)
        written[s] = str(path)
    missing = _missing_items(cfg, set(Xt.item_ids.tolist()))
    if missing:
        _event("assign.items_without_embeddings", logging.WARNING, count=len(missing), items=missing[:20])
    _event("assign.done", streams=list(written), items=len(Xt))
    return written


def _prepared(cfg: RunConfig):
    Xt, Xa = _embeddings(cfg)
    prep = prepare(Xt, Xa, _interactions(cfg, "train"), _interactions(cfg, "test"),
                   cfg.model.max_len, cfg.eval.cold_threshold)
    return prep


def _bundle_for(cfg: RunConfig):
    if cfg.model.resolved_variant == "id_only":
        return None
    return load_bundle(_require(_bundle_path(cfg), "semantic-ID bundle"))


def cmd_train(cfg: RunConfig) -> dict:
    prep = _prepared(cfg)
    bundle = _bundle_for(cfg)
    mcfg = model_config(bundle, cfg.model.settings, cfg.model.resolved_variant)
    params = init_params(mcfg, prep.Xt.item_ids, cfg.model.seed)
    index = make_index(params, bundle)
    t0 = time.perf_counter()
    trained, losses = train(params, prep.train_samples, index, cfg.train)
    out = _dir(cfg, "model")
    save_params(trained, out / "params.smcp")
    save_loss_log(losses, out / "loss.csv")
    _write_run_record(cfg, "model", ("quantize", "model", "train", "eval"))
    _event("train.done", variant=mcfg.variant, samples=len(prep.train_samples),
           first_loss=losses[0][1], last_loss=losses[-1][1], seconds=round(time.perf_counter() - t0, 2))
    return {"params": str(out / "params.smcp"), "loss": str(out / "loss.csv")}


def cmd_eval(cfg: RunConfig) -> dict:
    params = load_params(_require(Path(cfg.paths.out) / "model" / "params.smcp", "trained model"))
    bundle = None
    if params.config.variant != "id_only":
        bundle = load_bundle(_require(_bundle_path(cfg), "semantic-ID bundle"))
    prep = _prepared(cfg)
    index = make_index(params, bundle)
    batch = encode_samples(prep.test_samples, index, params.config.max_len)
    metrics, logits = evaluate(params, batch, index, prep.cold_items, cfg.hash)
    out = _dir(cfg, "eval")
    save_metrics(metrics, out / "metrics.json")
    sig = {"config_hash": cfg.hash, "n_perm": cfg.eval.n_perm, "p_value": None}
    if metrics.all_auc is not None:
        sig["p_value"] = permutation_pvalue(logits, batch.labels, cfg.eval.n_perm, cfg.eval.perm_seed)
    (out / "significance.json").write_text(json.dumps(sig, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _event("eval.done", all_auc=metrics.all_auc, cold_auc=metrics.cold_auc, logloss=metrics.logloss,
           n=metrics.n, n_cold=metrics.n_cold, p_value=sig["p_value"])
    return {"metrics": str(out / "metrics.json")}


def _slug(row: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", row.lower().replace("w/o", "wo")).strip("-")


def cmd_report(cfg: RunConfig) -> dict:
    prep = _prepared(cfg)
    ecfg = ExperimentConfig(cfg.quantize.quantize_config(), cfg.model.settings, cfg.train,
                            cfg.eval.cold_threshold, cfg.model.seed)
    out = _dir(cfg, "report")
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    results = {}
    for row in cfg.report.rows:
        t0 = time.perf_counter()
        m, *_ = run_variant(row, prep, ecfg)
        m = replace(m, config_hash=cfg.hash)
        save_metrics(m, runs / f"{_slug(row)}.json")
        results[row] = m
        _event("report.row", row=row, all_auc=m.all_auc, cold_auc=m.cold_auc, logloss=m.logloss,
               seconds=round(time.perf_counter() - t0, 2))
    md, tsv = report(results, cfg.report.rows)
    (out / "report.md").write_text(md, encoding="utf-8")
    (out / "report.tsv").write_text(tsv, encoding="utf-8")
    _write_run_record(cfg, "report", ("quantize", "model", "train", "eval", "report"))
    print(md, end="")
    return {"markdown": str(out / "report.md"), "tsv": str(out / "report.tsv")}


def cmd_gradcheck(cfg: RunConfig) -> dict:
    g = cfg.gradcheck
    worst = 0.0
    failed = []
    for v in g.variants:
        for seed in g.seeds:
            r = gradient_check(v, seed, g.delta)
            worst = max(worst, r.max_rel_error)
            ok = r.max_rel_error < g.tolerance and r.kink_crossings == 0
            print(f"gradcheck variant={v} seed={seed} max_rel_error={r.max_rel_error:.3e} "
                  f"worst={r.worst} kinks={r.kink_crossings} {'PASS' if ok else 'FAIL'}")
            if not ok:
                failed.append((v, seed))
    print(f"gradcheck max_rel_error={worst:.3e} tolerance={g.tolerance:.0e}")
    if failed:
        raise CliError("gradcheck_failed", f"max relative error {worst:.3e} >= {g.tolerance:.0e}",
                       failed=[f"{v}/{s}" for v, s in failed])
    return {"max_rel_error": worst}


def cmd_pipeline(cfg: RunConfig) -> dict:
    done = {}
    if cfg.paths.uses_synth:
        done["synth"] = cmd_synth(cfg)
    for name, fn in (("quantize", cmd_quantize), ("train", cmd_train), ("eval", cmd_eval),
                     ("report", cmd_report)):
        done[name] = fn(cfg)
    return done


HANDLERS = {
    "synth": cmd_synth, "quantize": cmd_quantize, "assign": cmd_assign, "train": cmd_train,
    "eval": cmd_eval, "report": cmd_report, "gradcheck": cmd_gradcheck, "pipeline": cmd_pipeline,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("unknown_command", message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semid", description=__doc__.splitlines()[0])
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="TOML run config (defaults apply when omitted)")
    p.add_argument("--out", help="output directory (overrides config and SEMID_OUT_DIR)")
    p.add_argument("--threads", type=int, help="worker threads (overrides SEMID_THREADS); results do not depend on it")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    out = args.out or os.environ.get("SEMID_OUT_DIR")
    if out:
        cfg = cfg.with_out(out)
    return cfg


def main(argv=None) -> int:
    _setup_logging()
    previous_threads = parallel.get_threads()
    try:
        args = _parser().parse_args(argv)
        if args.command not in HANDLERS:
            raise CliError("unknown_command", f"unknown command {args.command!r}; expected one of {list(COMMANDS)}")
        threads = args.threads if args.threads is not None else parallel.get_threads()
        if threads < 1:
            raise CliError("invalid_config", "--threads must be >= 1")
        if args.config is not None:
            _require(Path(args.config), "config file")
        cfg = _resolve(args)
        parallel.set_threads(threads)
        _event("start", command=args.command, config_hash=cfg.hash, threads=threads)
        t0 = time.perf_counter()
        # BLAS stays single-threaded so floating-point reductions never depend on --threads
        with threadpool_limits(limits=1):
            result = HANDLERS[args.command](cfg)
        _event("done", command=args.command, seconds=round(time.perf_counter() - t0, 2), artifacts=result)
        return 0
    except CliError as e:
        return _fail(e.code, str(e), **e.detail)
    except ConfigError as e:
        return _fail("invalid_config", str(e), key=e.key)
    except FileNotFoundError as e:
        return _fail("missing_artifact", str(e), path=e.filename)
    except DataFormatError as e:
        return _fail("data_error", str(e), reason=e.code)
    except NonFiniteGradient as e:
        return _fail("diverged", str(e))
    except ValueError as e:
        return _fail("data_error", str(e))
    finally:
        parallel.set_threads(previous_threads)


def _fail(code: str, message: str, **detail) -> int:
    _event("error", logging.ERROR, code=code, exit=EXIT_CODES[code], message=message, **detail)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
