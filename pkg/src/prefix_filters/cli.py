"""Batch entry points: learn, generate, eval, validate, transfer, report.

All commands read one JSON config. String values may reference environment
variables as ``${NAME}``; relative paths resolve against the config file's
directory. Exit codes: 0 success, 2 configuration or usage error, 3 pipeline
failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .decoder import DecoderConfig
from .evalkit import (
    diff_significant,
    read_samples_csv,
    run_eval,
    summarize,
    transfer_matrix,
    write_report,
)
from .filter_engine import FilterError, FilterSet, parse_filter_set, serialize_filter_set
from .generator import RemoteModel, TableModel, train_ngram
from .learner import (
    FallbackSynthesizer,
    LearningConfig,
    MinerParams,
    MinerSynthesizer,
    RemoteSynthesizer,
    learn,
    validate_filter,
)
from .oracle import BalancedBrackets, FirstErrorOnly, LeakDetector, MiniMol, SubprocessOracle

log = logging.getLogger("prefix_filters")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3


class ConfigError(Exception):
    pass


_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value: Any, path: str = "$") -> Any:
    if isinstance(value, str):
        def sub(m):
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"{path}: environment variable {name} is not set")
            return os.environ[name]

        return _ENV.sub(sub, value)
    if isinstance(value, list):
        return [_interpolate(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, dict):
        return {k: _interpolate(v, f"{path}.{k}") for k, v in value.items()}
    return value


@dataclass
class RunConfig:
    raw: dict
    base: Path
    seed: int = 0
    out: Path = Path("out")
    workers: int = 1
    learn_prompts: list[str] = field(default_factory=list)
    eval_prompts: list[str] = field(default_factory=list)

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def section(self, name: str) -> dict:
        sec = self.raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: expected an object")
        return sec


def _read_lines(path: Path, what: str) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{what}: file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{what}: cannot read {path}: {exc}") from None
    return [line for line in text.splitlines() if line.strip()]


def _read_texts(path: Path, what: str) -> list[str]:
    """A text corpus: a JSON list of strings, or one text per line."""
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"{what}: file not found: {path}") from None
        except ValueError as exc:
            raise ConfigError(f"{what}: {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, list) or not all(isinstance(t, str) for t in doc):
            raise ConfigError(f"{what}: {path} must hold a list of strings")
        return doc
    try:
        return path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise ConfigError(f"{what}: file not found: {path}") from None


def _digest(line: str) -> str:
    return hashlib.sha256(line.encode("utf-8")).hexdigest()


def load_config(path: str | Path, args: argparse.Namespace | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    raw = _interpolate(raw)
    cfg = RunConfig(raw=raw, base=path.resolve().parent)
    cfg.seed = int(raw.get("seed", 0))
    cfg.out = cfg.path(raw.get("out", "out"))
    cfg.workers = os.cpu_count() or 1
    if args is not None:
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = Path(args.out)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg.workers = args.workers
        if args.rounds is not None:
            raw.setdefault("learning", {})["rounds"] = args.rounds
    prompts = cfg.section("prompts")
    if "learn" in prompts:
        cfg.learn_prompts = _read_lines(cfg.path(prompts["learn"]), "prompts.learn")
    if "eval" in prompts:
        cfg.eval_prompts = _read_lines(cfg.path(prompts["eval"]), "prompts.eval")
    overlap = {_digest(p) for p in cfg.learn_prompts} & {_digest(p) for p in cfg.eval_prompts}
    if overlap:
        raise ConfigError(f"prompts: {len(overlap)} prompt(s) appear in both the learning and evaluation files")
    return cfg


# ---------------------------------------------------------------------------
# Component builders
# ---------------------------------------------------------------------------


def _auth(spec: dict) -> tuple[str | None, str | None]:
    auth = spec.get("auth") or {}
    return auth.get("header"), auth.get("value")


def build_model(cfg: RunConfig, spec: dict | None = None):
    spec = spec if spec is not None else cfg.section("model")
    kind = spec.get("type")
    try:
        if kind == "table":
            table = {tuple(json.loads(k)) if k.startswith("[") else tuple(k): v
                     for k, v in spec.get("table", {}).items()}
            return TableModel(spec["default"], table, spec.get("eos", "<eos>"), spec.get("order"))
        if kind == "ngram":
            corpus = _read_texts(cfg.path(spec["corpus"]), "model.corpus")
            return train_ngram(corpus, int(spec.get("order", 2)), float(spec.get("smoothing", 0.0)),
                               spec.get("alphabet", ""))
        if kind == "remote":
            header, value = _auth(spec)
            return RemoteModel(
                spec["url"], header, value,
                timeout=float(spec.get("timeout", 30.0)),
                retries=int(spec.get("retries", 2)),
                temperature=float(spec.get("temperature", 1.0)),
            )
    except KeyError as exc:
        raise ConfigError(f"model: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    raise ConfigError(f"model.type must be table, ngram or remote, got {kind!r}")


_BUILTIN_ORACLES = {"balanced_brackets": BalancedBrackets, "minimol": MiniMol}


def build_oracle(cfg: RunConfig):
    spec = cfg.section("oracle")
    kind = spec.get("type")
    if kind == "builtin":
        name = spec.get("name")
        params = spec.get("params", {})
        if name == "leak":
            oracle = LeakDetector(params.get("protected", {}))
        elif name in _BUILTIN_ORACLES:
            oracle = _BUILTIN_ORACLES[name]()
        else:
            raise ConfigError(f"oracle.name: unknown builtin {name!r}")
        return FirstErrorOnly(oracle) if spec.get("first_class_only") else oracle
    if kind == "subprocess":
        if "command" not in spec:
            raise ConfigError("oracle: missing field 'command'")
        return SubprocessOracle(spec["command"], float(spec.get("timeout", 30.0)))
    raise ConfigError(f"oracle.type must be builtin or subprocess, got {kind!r}")


def build_synthesizer(cfg: RunConfig, epsilon: float, min_catch: int):
    spec = cfg.section("synthesizer") or {"type": "miner"}
    kind = spec.get("type")
    try:
        params = MinerParams(**spec.get("params", {}))
    except TypeError as exc:
        raise ConfigError(f"synthesizer.params: {exc}") from None
    miner = MinerSynthesizer(params, epsilon, min_catch)
    if kind == "miner":
        return miner
    if kind in ("remote", "miner-fallback"):
        if "url" not in spec:
            raise ConfigError("synthesizer: missing field 'url'")
        header, value = _auth(spec)
        remote = RemoteSynthesizer(spec["url"], header, value, float(spec.get("timeout", 60.0)))
        return remote if kind == "remote" else FallbackSynthesizer(remote, miner)
    raise ConfigError(f"synthesizer.type must be miner, remote or miner-fallback, got {kind!r}")


def build_decoder(cfg: RunConfig) -> DecoderConfig:
    try:
        return DecoderConfig(seed=cfg.seed, **cfg.section("decoder"))
    except TypeError as exc:
        raise ConfigError(f"decoder: {exc}") from None


def build_learning(cfg: RunConfig) -> LearningConfig:
    try:
        return LearningConfig(seed=cfg.seed, decoder=build_decoder(cfg), workers=cfg.workers,
                              **cfg.section("learning"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"learning: {exc}") from None


def load_filters(path: str | Path) -> FilterSet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"filter file not found: {path}") from None
    try:
        return parse_filter_set(data)
    except FilterError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _reference_corpus(cfg: RunConfig) -> list[str]:
    ref = cfg.raw.get("reference_corpus")
    return _read_texts(cfg.path(ref), "reference_corpus") if ref else []


def _prompt_ids(prompts: Sequence[str]) -> list[str]:
    return [_digest(p)[:12] for p in prompts]


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_learn(cfg: RunConfig, args) -> int:
    lcfg = build_learning(cfg)
    if not cfg.learn_prompts:
        raise ConfigError("prompts.learn: no learning prompts configured")
    model, oracle = build_model(cfg), build_oracle(cfg)
    synth = build_synthesizer(cfg, lcfg.epsilon, lcfg.min_catch)
    reference = _reference_corpus(cfg)
    result = learn(
        model, oracle, cfg.learn_prompts, synth, lcfg, reference,
        model_id=str(cfg.raw.get("model_id", "")),
        domain_id=str(cfg.raw.get("domain_id", "")),
        prompt_ids=_prompt_ids(cfg.learn_prompts),
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "filters.json").write_bytes(serialize_filter_set(result.filters))
    _write_json(cfg.out / "learn_report.json", {
        "epsilon": lcfg.epsilon,
        "seed": cfg.seed,
        "rounds": [r.to_dict() for r in result.rounds],
        "reference_corpus": reference,
        "warning": result.warning,
    })
    print(f"learned {len(result.filters)} filters over {len(result.rounds)} rounds -> {cfg.out / 'filters.json'}")
    if result.warning:
        print(f"warning: {result.warning}", file=sys.stderr)
    return EXIT_OK


def _filters_arg(cfg: RunConfig, args, required: bool = False) -> FilterSet | None:
    if args.filters:
        return load_filters(args.filters)
    if required:
        raise ConfigError("--filters is required for this command")
    return None


def cmd_generate(cfg: RunConfig, args) -> int:
    prompts = cfg.eval_prompts or cfg.learn_prompts
    if not prompts:
        raise ConfigError("prompts: no prompts configured")
    filters = _filters_arg(cfg, args)
    oracle = None if args.no_oracle else build_oracle(cfg)
    report, rows = run_eval(build_model(cfg), filters, prompts, args.n, oracle, build_decoder(cfg),
                            _prompt_ids(prompts), round_label="generate")
    write_report(cfg.out, rows, report if oracle is not None else None)
    failed = sum(1 for r in rows if r.error is not None and not r.error.startswith("OracleCrashed"))
    print(f"wrote {len(rows)} samples -> {cfg.out / 'samples.csv'}")
    if failed:
        print(f"warning: {failed} samples failed to decode", file=sys.stderr)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not cfg.eval_prompts:
        raise ConfigError("prompts.eval: no evaluation prompts configured")
    filters = _filters_arg(cfg, args)
    oracle = build_oracle(cfg)
    model, dcfg = build_model(cfg), build_decoder(cfg)
    n = int(cfg.section("eval").get("n_per_prompt", 10))
    ids = _prompt_ids(cfg.eval_prompts)
    report, rows = run_eval(model, filters, cfg.eval_prompts, n, oracle, dcfg, ids, round_label="filtered")
    write_report(cfg.out, rows, report)
    print(f"validity {report.validity_rate:.4f} CI [{report.validity_ci[0]:.4f}, {report.validity_ci[1]:.4f}]"
          f" over {report.n_samples} samples")
    if filters is not None and len(filters):
        base, base_rows = run_eval(model, None, cfg.eval_prompts, n, oracle, dcfg, ids, round_label="baseline")
        write_report(cfg.out / "baseline", base_rows, base)
        a = [1.0 if r.valid else 0.0 for r in base_rows if r.valid is not None]
        b = [1.0 if r.valid else 0.0 for r in rows if r.valid is not None]
        _write_json(cfg.out / "comparison.json", {
            "baseline_validity": base.validity_rate,
            "filtered_validity": report.validity_rate,
            "gain": report.validity_rate - base.validity_rate,
            "significant": diff_significant(a, b, seed=cfg.seed),
        })
        print(f"baseline validity {base.validity_rate:.4f}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args) -> int:
    filters = _filters_arg(cfg, args, required=True)
    sec = cfg.section("validation")
    if "valid_corpus" in sec:
        valid = _read_texts(cfg.path(sec["valid_corpus"]), "validation.valid_corpus")
        reference = _reference_corpus(cfg)
    else:
        report_path = cfg.out / "learn_report.json"
        if not report_path.exists():
            raise ConfigError("validation.valid_corpus is not set and no learn_report.json exists in --out")
        doc = json.loads(report_path.read_text(encoding="utf-8"))
        valid = doc["rounds"][-1]["valid_texts"] if doc["rounds"] else []
        reference = doc.get("reference_corpus", [])
    invalid = _read_texts(cfg.path(sec["invalid_corpus"]), "validation.invalid_corpus") if "invalid_corpus" in sec else []
    eps = float(sec.get("epsilon", filters.epsilon))
    results = []
    for spec in filters:
        fb = validate_filter(spec, invalid, valid, reference, eps, min_catch=0)
        ok = fb.mis_trigger_rate < eps
        results.append({"id": spec.id, "passed": ok, "mis_trigger_rate": fb.mis_trigger_rate,
                        "catch_count": fb.catch_count, "counterexamples": fb.to_dict()["counterexamples"]})
        print(f"{'PASS' if ok else 'FAIL'} {spec.id} mis_trigger_rate={fb.mis_trigger_rate:.4f} catch={fb.catch_count}")
    _write_json(cfg.out / "validation.json", {"epsilon": eps, "filters": results})
    return EXIT_OK


def cmd_transfer(cfg: RunConfig, args) -> int:
    entries = cfg.raw.get("transfer")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("transfer: expected a non-empty list of {model_id, filters, samples}")
    filter_sets, invalid = {}, {}
    for i, e in enumerate(entries):
        try:
            mid = e["model_id"]
            filter_sets[mid] = load_filters(cfg.path(e["filters"]))
            rows = read_samples_csv(cfg.path(e["samples"]))
        except KeyError as exc:
            raise ConfigError(f"transfer[{i}]: missing field {exc}") from None
        except FileNotFoundError as exc:
            raise ConfigError(f"transfer[{i}]: {exc}") from None
        invalid[mid] = [r.text for r in rows if r.valid is False]
    cells = transfer_matrix(filter_sets, invalid)
    write_report(cfg.out, transfer=cells)
    for c in cells:
        print(f"{c.owner} -> {c.source}: {c.capture_rate:.4f}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    path = cfg.out / "samples.csv"
    if not path.exists():
        raise ConfigError(f"no samples.csv in {cfg.out}")
    rows = read_samples_csv(path)
    report = summarize(rows, round_label="report", judged=any(r.valid is not None for r in rows), seed=cfg.seed)
    write_report(cfg.out, report=report)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "learn": cmd_learn,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "validate": cmd_validate,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prefix-filters", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="oracle worker threads (default: logical cores)")
    p.add_argument("--rounds", type=int, help="override learning.rounds")
    p.add_argument("--filters", help="filter-set JSON file")
    p.add_argument("--no-oracle", action="store_true", help="generate: skip judging")
    p.add_argument("-n", type=int, default=1, help="generate: samples per prompt")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.n < 1:
            raise ConfigError("-n must be >= 1")
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a pipeline failure
        log.debug("pipeline failure", exc_info=True)
        print(f"pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
