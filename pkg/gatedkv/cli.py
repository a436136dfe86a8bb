"""命令行入口：train / eval / bench / viz / gen-corpus

退出码：0 成功，2 用法或配置错误，3 运行时失败。
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from .bench import bench_policies
from .checkpoint import load_checkpoint, load_weights_into, save_checkpoint
from .config import GATEDKV_OUTPUT_DIR, GATEDKV_SEED, GATEDKV_THREADS, print_settings, setup_logging
from .corpus import chunk_tokens, generate_synthetic_corpus, ingest_corpus, read_corpus, tokenize
from .errors import ConfigError, GatedKVError, PolicyError
from .metrics import evaluate_policy, retention_sweep, run_metrics
from .models import PolicyKind, RunConfig
from .policies import matched_policy_spec, parse_policy_names, policy_registry
from .training import build_model, train
from .utils.reporting import write_dicts, write_rows
from .viz import export_visualizations

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

CHECKPOINT_NAME = "model.gkvc"
# eval 对单个基线策略使用的驱逐率
EVAL_EVICTION_RATIO = 0.5


# ----------------------------------------------------------------------
# 配置
# ----------------------------------------------------------------------
def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """KEY=VAL，KEY 为点分路径（如 model.tau=0.3）；VAL 按 JSON 解析，失败时当作字符串"""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not KEY=VAL")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override '{item}' has an empty key")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{key}': '{part}' is not a section")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return data


def _format_validation(e: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors())


def load_run_config(path: Optional[str], overrides: Sequence[str] = (), seed: Optional[int] = None) -> RunConfig:
    """优先级：--override > --seed > 配置文件 > GATEDKV_SEED（仅种子） > 内置默认值"""
    data: Dict[str, Any] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}")
    if seed is not None:
        data.setdefault("train", {})["seed"] = seed
        data.setdefault("bench", {})["random_seed"] = seed
    else:
        data.setdefault("train", {}).setdefault("seed", GATEDKV_SEED)
        data.setdefault("bench", {}).setdefault("random_seed", GATEDKV_SEED)
    apply_overrides(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation(e))


def _print_effective(cfg: RunConfig, out_dir: str) -> None:
    print("--- effective config ---")
    print(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
    print(f"output_dir: {out_dir}")
    print("------------------------")


# ----------------------------------------------------------------------
# 命令
# ----------------------------------------------------------------------
def _require_file(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"missing {what} path")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _checkpoint_path(args, out_dir: str) -> str:
    return _require_file(args.checkpoint or os.path.join(out_dir, CHECKPOINT_NAME), "checkpoint")


def _eval_windows(cfg: RunConfig, path: str):
    length = cfg.bench.prompt_len + cfg.bench.continuation_len
    return chunk_tokens(read_corpus(path), length, cfg.bench.max_windows)


def cmd_train(cfg: RunConfig, args, out_dir: str) -> int:
    corpus = _require_file(args.corpus or cfg.corpus_path, "corpus")
    model = build_model(cfg.model, cfg.train.seed)
    if cfg.train.init_checkpoint:
        copied = load_weights_into(model, _require_file(cfg.train.init_checkpoint, "init checkpoint"))
        logger.info(f"[CLI] 从 {cfg.train.init_checkpoint} 载入 {copied} 个张量")
    windows = ingest_corpus(corpus, cfg.train.seq_len)
    model, history = train(windows, model, cfg.train, cfg.loss)
    save_checkpoint(model, os.path.join(out_dir, CHECKPOINT_NAME))
    write_dicts(os.path.join(out_dir, "metrics.csv"), [r.to_dict() for r in history])
    final = history[-1]
    print(f"[train] steps={len(history)} final lm_loss={final.lm_loss:.4f} "
          f"mean eviction={final.eviction_ratio:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args, out_dir: str) -> int:
    model = load_checkpoint(_checkpoint_path(args, out_dir))
    windows = _eval_windows(cfg, _require_file(args.corpus or cfg.eval_corpus_path, "evaluation corpus"))
    kinds = parse_policy_names(args.policy) if args.policy else [PolicyKind.ATTENTION_GATE]
    rows = []
    for kind in kinds:
        spec = matched_policy_spec(kind, cfg.bench.prompt_len, EVAL_EVICTION_RATIO, cfg.bench)
        policy = policy_registry.create(spec, recent_window=model.config.recent_window)
        evaluation = evaluate_policy(model, windows, policy, cfg.bench.prompt_len)
        metrics = run_metrics(kind.value, evaluation, model.config, cfg.bench.prompt_len)
        rows.append(metrics.to_dict())
        print(f"[eval] {kind.value}: perplexity={metrics.perplexity:.4f} eviction={metrics.eviction_ratio_mean:.4f} "
              f"prefill={metrics.prefill_seconds * 1000:.2f}ms")
    write_dicts(os.path.join(out_dir, "eval.csv"), rows)
    if PolicyKind.ATTENTION_GATE in kinds:
        points = retention_sweep(model, windows, cfg.bench.prompt_len)
        write_rows(os.path.join(out_dir, "retention_sweep.csv"), ["tau", "retention", "perplexity"],
                   [(p.tau, p.retention, p.perplexity) for p in points])
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args, out_dir: str) -> int:
    model = load_checkpoint(_checkpoint_path(args, out_dir))
    windows = _eval_windows(cfg, _require_file(args.corpus or cfg.eval_corpus_path, "evaluation corpus"))
    kinds = parse_policy_names(args.policy) if args.policy else list(cfg.bench.policies)
    results = bench_policies(model, windows, cfg.bench, kinds, threads=GATEDKV_THREADS)
    write_dicts(os.path.join(out_dir, "bench.csv"), [m.to_dict() for m in results])
    for m in results:
        print(f"[bench] {m.policy}: perplexity={m.perplexity:.4f} eviction={m.eviction_ratio_mean:.4f} "
              f"kv_bytes={m.kv_bytes_pruned}/{m.kv_bytes_full} prefill={m.prefill_seconds * 1000:.2f}ms")
    return EXIT_OK


def cmd_viz(cfg: RunConfig, args, out_dir: str) -> int:
    model = load_checkpoint(_checkpoint_path(args, out_dir))
    if args.text is None:
        raise ConfigError("viz needs --text")
    tokens = tokenize(args.text)
    if not tokens:
        raise ConfigError("viz needs a non-empty --text")
    if len(tokens) > model.config.max_seq:
        raise ConfigError(f"text of {len(tokens)} bytes exceeds max_seq {model.config.max_seq}")
    written = export_visualizations(model, tokens, out_dir)
    print(f"[viz] wrote {sum(len(v) for v in written.values())} files to {out_dir}")
    return EXIT_OK


def cmd_gen_corpus(cfg: RunConfig, args, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.train.seed
    outputs = {
        "train.txt": generate_synthetic_corpus(args.bytes, seed),
        "heldout.txt": generate_synthetic_corpus(max(1, args.bytes // 4), seed + 1),
    }
    for name, text in outputs.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    print(f"[gen-corpus] wrote {', '.join(outputs)} to {out_dir}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "viz": cmd_viz,
    "gen-corpus": cmd_gen_corpus,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatedkv", description="Attention-Gate KV-cache eviction toolkit")
    parser.add_argument("verb", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int, help="overrides train.seed and bench.random_seed")
    parser.add_argument("--out", help=f"output directory (default {GATEDKV_OUTPUT_DIR}/<name>)")
    parser.add_argument("--policy", help="NAME[,NAME...]")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VAL")
    parser.add_argument("--checkpoint", help="model checkpoint (default <out>/model.gkvc)")
    parser.add_argument("--corpus", help="training corpus (train) or held-out corpus (eval/bench)")
    parser.add_argument("--text", help="input text for viz")
    parser.add_argument("--bytes", type=int, default=200_000, help="gen-corpus size in bytes")
    parser.add_argument("--log-level", help="overrides GATEDKV_LOG_LEVEL")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    setup_logging(args.log_level)
    try:
        cfg = load_run_config(args.config, args.override, args.seed)
        out_dir = args.out or os.path.join(GATEDKV_OUTPUT_DIR, cfg.name)
        print_settings()
        _print_effective(cfg, out_dir)
        os.makedirs(out_dir, exist_ok=True)
        return COMMANDS[args.verb](cfg, args, out_dir)
    except (ConfigError, PolicyError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GatedKVError as e:
        logger.error(f"[CLI] {args.verb} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"[CLI] {args.verb} crashed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
