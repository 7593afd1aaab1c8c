"""Command-line surface: generate, train, eval, compare, gradcheck, estimator-check.

Every command reads one TOML config file (see README for the schema) and is
reproducible given the same config and seed; `--seed` and `--out` override
the file. Exit codes: 0 success, 1 check failure, 2 divergence, 3 config or
I/O error. The IRPO_LOG environment variable selects log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import gradient
from .data import (
    DatasetError,
    Policy,
    PolicyError,
    RankedExample,
    SynthConfig,
    ingest_jsonl,
    load_policy,
    make_example,
    save_policy,
    synthesize,
    tabular_policy,
    write_jsonl,
    CandidateItem,
)
from .gains import GainScheme
from .metrics import evaluate_policy
from .trainer import METHODS, TrainConfig, train

log = logging.getLogger("irpo")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_DIVERGED = 2
EXIT_CONFIG = 3


class ConfigError(ValueError):
    """The run configuration is missing or malformed."""


@dataclass
class RunConfig:
    """Everything a command needs: raw sections plus resolved output paths."""

    raw: dict[str, Any]
    out_dir: Path
    seed: int

    def section(self, name: str) -> dict[str, Any]:
        sec = self.raw.get(name)
        if sec is None:
            raise ConfigError(f"config is missing the [{name}] section")
        return sec


def load_config(path: str, out_override: str | None, seed_override: int | None) -> RunConfig:
    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    out_dir = Path(out_override or raw.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    return RunConfig(raw=raw, out_dir=out_dir, seed=seed)


def _expand_grades(spec: Sequence, list_size: int) -> tuple[int, ...]:
    """Accept [[grade, count], ...] pairs or a flat grade list of length n."""
    if spec and isinstance(spec[0], (list, tuple)):
        grades: list[int] = []
        for grade, count in spec:
            grades.extend([int(grade)] * int(count))
        return tuple(grades)
    return tuple(int(g) for g in spec)


def synth_config(run: RunConfig) -> tuple[SynthConfig, int]:
    sec = run.section("synth")
    try:
        list_size = int(sec["list_size"])
        grades = _expand_grades(sec["grades"], list_size)
        cfg = SynthConfig(
            num_prompts=int(sec["num_prompts"]) + int(sec.get("eval_prompts", 0)),
            list_size=list_size,
            grades=grades,
            feature_dim=int(sec.get("feature_dim", 0)),
            noise=float(sec.get("noise", 0.0)),
            distractor_scale=float(sec.get("distractor_scale", 1.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"[synth] is missing key {exc.args[0]!r}") from None
    return cfg, int(sec.get("eval_prompts", 0))


def train_config(run: RunConfig, method: str | None = None) -> TrainConfig:
    sec = run.section("train")
    gain = GainScheme(
        kind=sec.get("gain", "ndcg"),
        k=int(sec.get("k", 10)),
        lam=float(sec.get("lambda", 0.5)),
        mrr_per_item=bool(sec.get("mrr_per_item", False)),
    )
    batch = sec.get("batch_size")
    return TrainConfig(
        method=method or sec.get("method", "irpo"),
        beta=float(sec.get("beta", 1.0)),
        learning_rate=float(sec.get("learning_rate", 0.1)),
        epochs=int(sec.get("epochs", 1)),
        batch_size=int(batch) if batch else None,
        gain=gain,
        clip_L=float(sec.get("clip_L", 10.0)),
        seed=run.seed,
        eval_every=int(sec.get("eval_every", 10)),
        eval_ks=tuple(int(k) for k in sec.get("eval_ks", (1, 5, 10))),
        policy_kind=sec.get("policy", "tabular"),
        refresh_reference=bool(sec.get("refresh_reference", True)),
    )


def resolve_datasets(run: RunConfig) -> tuple[list[RankedExample], list[RankedExample]]:
    """Load the train/eval datasets from [data] paths, else synthesize them."""
    data = run.raw.get("data")
    if data is not None:
        try:
            return ingest_jsonl(data["train"]), ingest_jsonl(data["eval"])
        except KeyError as exc:
            raise ConfigError(f"[data] is missing key {exc.args[0]!r}") from None
    cfg, eval_prompts = synth_config(run)
    examples = synthesize(cfg, run.seed)
    split = cfg.num_prompts - eval_prompts
    if not 0 < split <= len(examples):
        raise ConfigError("eval_prompts must leave at least one training prompt")
    return examples[:split], examples[split:]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(run: RunConfig) -> int:
    cfg, eval_prompts = synth_config(run)
    examples = synthesize(cfg, run.seed)
    split = cfg.num_prompts - eval_prompts
    train_path = run.out_dir / "train.jsonl"
    write_jsonl(examples[:split], train_path)
    print(f"wrote {split} examples to {train_path}")
    if eval_prompts:
        eval_path = run.out_dir / "eval.jsonl"
        write_jsonl(examples[split:], eval_path)
        print(f"wrote {eval_prompts} examples to {eval_path}")
    per_list = Counter(int(g) for g in examples[0].relevance)
    histogram = " ".join(f"{g}:{c}" for g, c in sorted(per_list.items(), reverse=True))
    print(f"list size {cfg.list_size}, grade histogram per list: {histogram}")
    return EXIT_OK


def cmd_train(run: RunConfig) -> int:
    train_set, eval_set = resolve_datasets(run)
    config = train_config(run)
    policy, trace = train(config, train_set, eval_set)
    trace_path = run.out_dir / "trace.csv"
    trace_path.write_text(trace.to_csv(), encoding="utf-8")
    save_policy(policy, run.out_dir / "policy.json")
    print(f"wrote {trace_path} and {run.out_dir / 'policy.json'}")
    if trace.diverged:
        print("training diverged; wrote last finite checkpoint", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(run: RunConfig) -> int:
    sec = run.section("eval")
    try:
        policy = load_policy(sec["policy"])
        examples = ingest_jsonl(sec["data"])
    except KeyError as exc:
        raise ConfigError(f"[eval] is missing key {exc.args[0]!r}") from None
    ks = [int(k) for k in sec.get("ks", (1, 5, 10))]
    result = evaluate_policy(policy, examples, ks)
    payload = json.dumps(result.to_json_dict(), indent=2)
    (run.out_dir / "metrics.json").write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return EXIT_OK


def cmd_compare(run: RunConfig) -> int:
    sec = run.section("train")
    methods = sec.get("methods")
    if not methods:
        raise ConfigError("[train] must list methods for compare")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} in methods")
    train_set, eval_set = resolve_datasets(run)

    ks = tuple(int(k) for k in sec.get("eval_ks", (1, 5, 10)))
    header = ["method"]
    header += [f"ndcg@{k}" for k in ks]
    header += [f"recall@{k}" for k in ks]
    header += ["wall_time_s", "policy_eval_count", "diverged"]
    lines = [",".join(header)]
    for method in methods:
        config = train_config(run, method=method)
        started = time.perf_counter()
        policy, trace = train(config, train_set, eval_set)
        elapsed = time.perf_counter() - started
        final = trace.records[-1]
        row = [method]
        row += [repr(final.ndcg[k]) for k in ks]
        row += [repr(final.recall[k]) for k in ks]
        row += [f"{elapsed:.3f}", str(trace.policy_eval_count), str(int(trace.diverged))]
        lines.append(",".join(row))
        log.info("compare: %s finished in %.3fs", method, elapsed)
    out_path = run.out_dir / "compare.csv"
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    print(f"wrote {out_path}")
    return EXIT_OK


def _random_check_instance(
    rng: np.random.Generator, n: int, n_examples: int
) -> tuple[Policy, Policy, list[RankedExample]]:
    """Random tabular policies and examples for gradient checking."""
    examples = []
    for e in range(n_examples):
        pid = f"check{e}"
        cands = [CandidateItem(f"{pid}-c{j}") for j in range(n)]
        relevance = rng.integers(0, 3, size=n)
        examples.append(make_example(pid, cands, relevance))
    theta = tabular_policy(examples)
    theta.params = rng.normal(scale=1.0, size=theta.params.shape)
    ref = theta.copy()
    ref.params = rng.normal(scale=1.0, size=ref.params.shape)
    return theta, ref, examples


def cmd_gradcheck(run: RunConfig) -> int:
    sec = run.raw.get("gradcheck", {})
    instances = int(sec.get("instances", 10))
    per_instance = int(sec.get("examples_per_instance", 3))
    min_n = int(sec.get("min_n", 2))
    max_n = int(sec.get("max_n", 8))
    beta = float(sec.get("beta", 1.0))
    step = float(sec.get("step", 1e-5))
    threshold = float(sec.get("threshold", 1e-6))
    scheme = GainScheme(kind=sec.get("gain", "ndcg"))

    rng = np.random.default_rng(run.seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(min_n, max_n + 1))
        theta, ref, examples = _random_check_instance(rng, n, per_instance)
        report = gradient.gradient_check(
            theta, ref, examples, scheme, beta, h=step, threshold=threshold
        )
        worst = max(worst, report.max_rel_err)
    passed = worst < threshold
    payload = {"max_rel_err": worst, "threshold": threshold, "instances": instances, "pass": passed}
    text = json.dumps(payload, indent=2)
    (run.out_dir / "gradcheck.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_estimator_check(run: RunConfig) -> int:
    sec = run.raw.get("estimator", {})
    n = int(sec.get("list_size", 6))
    rank = int(sec.get("rank", 1))
    samples = int(sec.get("samples", 100_000))
    clip_L = float(sec.get("clip_L", 10.0))
    beta = float(sec.get("beta", 1.0))

    rng = np.random.default_rng(run.seed)
    theta, ref, examples = _random_check_instance(rng, n, 1)
    report = gradient.sampled_grad(
        theta, ref, examples[0], rank, beta, samples, seed=run.seed, clip_L=clip_L
    )
    text = json.dumps(report.to_json_dict(), indent=2)
    (run.out_dir / "estimator.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if report.max_abs_dev <= report.bound else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "estimator-check": cmd_estimator_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irpo", description="Listwise preference optimization over ranked lists."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="path to the TOML run config")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        cmd.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("IRPO_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    try:
        run = load_config(args.config, args.out, args.seed)
        return COMMANDS[args.command](run)
    except (ConfigError, DatasetError, PolicyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:  # console_scripts hook
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
