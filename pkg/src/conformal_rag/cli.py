"""Command-line interface: ingest, calibrate, query, evaluate.

Exit codes: 0 success, 2 usage or configuration error, 3 data or contract
error, 4 remote provider failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from urllib.parse import urlsplit, urlunsplit

from . import __version__
from .calibration import (
    LLMQuestionGenerator,
    generate_calibration_set,
    import_calibration_set,
    load_report,
    make_judge,
    run_calibration,
    save_report,
    write_questions,
)
from .config import Config, load_config
from .corpus import chunk_corpus, chunking_config, read_documents
from .embedding import EmbeddingProvider, make_embedder
from .errors import ConfigError, ConformalRagError, DataError
from .evaluation import (
    coverage_tolerance,
    sweep_alpha,
    write_detail_jsonl,
    write_sweep_csv,
)
from .generation import answer, assemble_context
from .http import JsonClient, api_key_from_env
from .llm import ChatProvider, RemoteChatProvider, load_template
from .retrieval import conformal_retrieve
from .vectorstore import VectorStore, build_store, load_store, save_store

logger = logging.getLogger("conformal_rag")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_PROVIDER = 4


def make_chat_provider(cfg: Config) -> ChatProvider:
    if not cfg.llm.endpoint or not cfg.llm.model:
        raise ConfigError("llm.endpoint and llm.model must be configured for this command")
    client = JsonClient(cfg.llm.endpoint, api_key_from_env(), max_in_flight=cfg.llm.max_in_flight)
    return RemoteChatProvider(client, cfg.llm.model)


def make_store_embedder(cfg: Config, store: VectorStore | None = None) -> EmbeddingProvider:
    dim = cfg.embedding.dim
    if dim is None:
        dim = store.dim if store is not None else 256
    return make_embedder(
        cfg.embedding.provider,
        dim=dim,
        endpoint=cfg.embedding.endpoint,
        model=cfg.embedding.model,
        batch=cfg.embedding.batch,
        api_key=api_key_from_env(),
        max_in_flight=cfg.embedding.max_in_flight,
    )


def _redact_url(url: str | None) -> str | None:
    if not url:
        return url
    parts = urlsplit(url)
    netloc = parts.netloc.rsplit("@", 1)[-1]
    return urlunsplit((parts.scheme, netloc, parts.path, "<redacted>" if parts.query else "", ""))


def _log_config(cfg: Config) -> None:
    d = cfg.to_dict()
    d["embedding"]["endpoint"] = _redact_url(d["embedding"]["endpoint"])
    d["llm"]["endpoint"] = _redact_url(d["llm"]["endpoint"])
    d["api_key"] = "<set>" if api_key_from_env() else "<unset>"
    logger.info("effective config: %s", json.dumps(d, sort_keys=True))


def _int_or_all(text: str):
    if text == "all":
        return "all"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'all', got {text!r}") from None


def _float(name: str):
    def parse(text: str) -> float:
        try:
            return float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None

    return parse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="conformal-rag", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="TOML config file")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ingest = sub.add_parser("ingest", help="chunk and embed a corpus into a store file")
    ingest.add_argument("--corpus", required=True)
    ingest.add_argument("--out", help="store file (default: paths.store)")
    ingest.add_argument("--format", default="one-doc-per-file", choices=["one-doc-per-file", "plain-text"])
    ingest.add_argument("--chunk-size", type=int)
    ingest.add_argument("--overlap", type=int)
    ingest.add_argument("--metric", choices=["cosine", "dot"])
    ingest.add_argument("--dim", type=int)

    cal = sub.add_parser("calibrate", help="compute the conformal similarity cutoff")
    cal.add_argument("--store")
    cal.add_argument("--questions", help="JSON Lines question file")
    cal.add_argument("--generate", type=int, metavar="N", help="generate N questions with the LLM")
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--questions-out", help="save generated questions here")
    cal.add_argument("--alpha", type=_float("alpha"))
    cal.add_argument("--mode", choices=["finite-sample", "paper-percentile"])
    cal.add_argument("--max-rank", type=_int_or_all)
    cal.add_argument("--judge", choices=["substring", "llm"])
    cal.add_argument("--strict", action="store_true", default=None)
    cal.add_argument("--workers", type=int, default=1)
    cal.add_argument("--out", help="report file or directory (default: paths.report)")

    q = sub.add_parser("query", help="retrieve with the calibrated cutoff and answer")
    q.add_argument("question")
    q.add_argument("--store")
    q.add_argument("--calibration", help="calibration report (default: paths.report)")
    q.add_argument("--comparison", choices=["geq", "strict-gt"])
    q.add_argument("--max-chunks", type=int)
    q.add_argument("--max-context-chars", type=int)
    q.add_argument("--json", action="store_true", help="print the result as JSON")
    q.add_argument("--dry-run", action="store_true", help="stop before calling the chat provider")

    ev = sub.add_parser("evaluate", help="measure held-out coverage for one or more alphas")
    ev.add_argument("--store")
    ev.add_argument("--calib", required=True, help="calibration question file")
    ev.add_argument("--test", required=True, help="test question file")
    ev.add_argument("--alpha", required=True, help="comma-separated alphas")
    ev.add_argument("--mode", choices=["finite-sample", "paper-percentile"])
    ev.add_argument("--comparison", choices=["geq", "strict-gt"])
    ev.add_argument("--max-rank", type=_int_or_all)
    ev.add_argument("--judge", choices=["substring", "llm"])
    ev.add_argument("--baseline-k", type=int)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--out", required=True, help="CSV output")
    ev.add_argument("--detail-out", help="per-question JSON Lines output")
    return p


def _require_path(value: str | None, flag: str, key: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required (or set {key} in the config file)")
    return value


def _open_store(path: str, cfg: Config) -> tuple[VectorStore, EmbeddingProvider]:
    store = load_store(path)
    embedder = make_store_embedder(cfg, store)
    if embedder.embedder_id != store.embedder_id:
        logger.warning(
            "store embedder_id %r differs from configured %r", store.embedder_id, embedder.embedder_id
        )
    return store, embedder


def cmd_ingest(args, cfg: Config) -> int:
    out = _require_path(args.out or cfg.paths.store, "--out", "paths.store")
    corpus = Path(args.corpus)
    if not corpus.exists():
        raise ConfigError(f"corpus directory does not exist: {corpus}")
    documents, rejected = read_documents(corpus, args.format)
    for r in rejected:
        print(f"rejected {r.path}: {r.reason}", file=sys.stderr)
    if not documents:
        raise DataError(f"empty corpus: no loadable documents under {corpus}")
    chunks = chunk_corpus(documents, cfg.chunking.size, cfg.chunking.overlap)
    embedder = make_store_embedder(cfg)
    store = build_store(
        chunks,
        embedder,
        metric=cfg.similarity.metric,
        chunking=chunking_config(cfg.chunking.size, cfg.chunking.overlap),
    )
    save_store(store, out)
    print(f"documents: {len(documents)}  rejected: {len(rejected)}  chunks: {len(store)}")
    print(f"embedder_id: {store.embedder_id}")
    print(f"store: {out}")
    return EXIT_OK


def cmd_calibrate(args, cfg: Config) -> int:
    if args.questions and args.generate is not None:
        raise ConfigError("--questions and --generate are mutually exclusive")
    if not args.questions and args.generate is None:
        raise ConfigError("one of --questions or --generate is required")
    store_path = _require_path(args.store or cfg.paths.store, "--store", "paths.store")
    out = _require_path(args.out or cfg.paths.report, "--out", "paths.report")
    store, embedder = _open_store(store_path, cfg)

    llm = None
    if cfg.calibration.judge == "llm" or args.generate is not None:
        llm = make_chat_provider(cfg)
    if args.questions:
        questions = import_calibration_set(args.questions)
        source = {"origin": "imported", "path": str(args.questions)}
    else:
        stats: dict = {}
        generator = LLMQuestionGenerator(llm, load_template(cfg.template_path("generator.txt"), "generator.txt"))
        questions = generate_calibration_set(store, generator, args.generate, args.seed, stats)
        source = {"origin": "generated", **stats}
        if args.questions_out:
            write_questions(args.questions_out, questions)
        if not questions:
            raise DataError("question generation produced no usable questions")

    judge = make_judge(
        cfg.calibration.judge, llm, load_template(cfg.template_path("judge.txt"), "judge.txt") if llm else None
    )
    report = run_calibration(
        store,
        questions,
        judge,
        embedder,
        cfg.calibration.alpha,
        cfg.calibration.mode,
        cfg.max_rank,
        metric=cfg.similarity.metric,
        strict=cfg.calibration.strict,
        workers=args.workers,
        question_source=source,
    )
    path = save_report(report, out)
    print(f"questions: {report.n_questions}  labeled: {report.n_labeled}  dropped: {report.n_dropped}")
    print(f"alpha: {report.alpha}  mode: {report.quantile_mode}  threshold: {report.threshold!r}")
    for w in report.warnings:
        print(f"WARNING: {w}", file=sys.stderr)
    print(f"report: {path}")
    return EXIT_OK


def cmd_query(args, cfg: Config) -> int:
    store_path = _require_path(args.store or cfg.paths.store, "--store", "paths.store")
    report_path = _require_path(args.calibration or cfg.paths.report, "--calibration", "paths.report")
    store, embedder = _open_store(store_path, cfg)
    report = load_report(report_path)
    ctx = conformal_retrieve(
        args.question,
        store,
        report,
        embedder,
        budget=cfg.retrieval.max_chunks,
        comparison=cfg.retrieval.comparison,
    )
    prompt = assemble_context(
        ctx,
        store,
        load_template(cfg.template_path("answer.txt"), "answer.txt"),
        cfg.retrieval.max_context_chars,
        system_template=load_template(cfg.template_path("system.txt"), "system.txt"),
    )
    result = None
    if not args.dry_run:
        result = answer(prompt, make_chat_provider(cfg))

    if args.json:
        out = {"context": ctx.to_dict(), "prompt": prompt.messages(), "answer": None}
        if result is not None:
            out["answer"] = {
                "text": result.text,
                "model_id": result.model_id,
                "prompt_chars": result.prompt_chars,
                "timing": result.timing,
            }
        print(json.dumps(out, indent=2, ensure_ascii=False))
        return EXIT_OK

    print(f"threshold: {ctx.threshold_used!r} ({ctx.comparison})  alpha: {ctx.alpha}")
    print(f"{'rank':>4}  {'score':>10}  chunk_id")
    for h in ctx.hits:
        print(f"{h.rank:>4}  {h.score:>10.6f}  {h.chunk_id}")
    print(f"hits: {len(ctx.hits)}  truncated: {ctx.truncated}" + (f" ({ctx.truncation_reason})" if ctx.truncated else ""))
    if ctx.truncated:
        print(f"WARNING: context truncated; the {1 - report.alpha:.0%} coverage guarantee does not hold", file=sys.stderr)
    if result is not None:
        print()
        print(result.text)
    return EXIT_OK


def _parse_alphas(text: str) -> list[float]:
    try:
        alphas = [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise ConfigError(f"--alpha must be comma-separated numbers, got {text!r}") from None
    if not alphas:
        raise ConfigError("--alpha needs at least one value")
    for a in alphas:
        if not 0 < a < 1:
            raise ConfigError(f"calibration.alpha: must be strictly between 0 and 1, got {a}")
    return alphas


def cmd_evaluate(args, cfg: Config) -> int:
    alphas = _parse_alphas(args.alpha)
    store_path = _require_path(args.store or cfg.paths.store, "--store", "paths.store")
    calib = import_calibration_set(args.calib)
    test = import_calibration_set(args.test)
    overlap = sorted({q.question_id for q in calib} & {q.question_id for q in test})
    if overlap:
        raise ConfigError(f"calibration and test files share question_id(s): {overlap[:10]}")
    store, embedder = _open_store(store_path, cfg)
    llm = make_chat_provider(cfg) if cfg.calibration.judge == "llm" else None
    judge = make_judge(
        cfg.calibration.judge, llm, load_template(cfg.template_path("judge.txt"), "judge.txt") if llm else None
    )
    results = sweep_alpha(
        store,
        calib,
        test,
        judge,
        embedder,
        alphas,
        cfg.calibration.mode,
        cfg.retrieval.comparison,
        cfg.max_rank,
        baseline_k=args.baseline_k,
        workers=args.workers,
    )
    write_sweep_csv(results, args.out)
    if args.detail_out:
        write_detail_jsonl(results, args.detail_out)
    for r in results:
        eps = coverage_tolerance(r.alpha, r.n_test)
        status = "ok" if r.empirical_coverage >= r.target - eps else "BELOW TARGET"
        print(
            f"alpha={r.alpha:g}  threshold={r.threshold!r}  coverage={r.empirical_coverage:.4f}  "
            f"target={r.target:.4f} (-{eps:.4f})  mean_set={r.mean_set_size:.2f}  "
            f"top-{r.baseline_k} coverage={r.baseline_coverage:.4f}  n_test={r.n_test}  "
            f"excluded={r.n_excluded}  [{status}]"
        )
    print(f"csv: {args.out}")
    return EXIT_OK


_COMMANDS = {"ingest": cmd_ingest, "calibrate": cmd_calibrate, "query": cmd_query, "evaluate": cmd_evaluate}


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "chunking.size": get("chunk_size"),
        "chunking.overlap": get("overlap"),
        "similarity.metric": get("metric"),
        "embedding.dim": get("dim"),
        "calibration.alpha": get("alpha") if args.command == "calibrate" else None,
        "calibration.mode": get("mode"),
        "calibration.max_rank": get("max_rank"),
        "calibration.judge": get("judge"),
        "calibration.strict": get("strict"),
        "retrieval.comparison": get("comparison"),
        "retrieval.max_chunks": get("max_chunks"),
        "retrieval.max_context_chars": get("max_context_chars"),
    }


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, _overrides(args))
        _log_config(cfg)
        return _COMMANDS[args.command](args, cfg)
    except ConformalRagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
