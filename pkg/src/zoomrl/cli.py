"""Operator commands: gen, curate, train, eval, inspect, report.

Every command is deterministic given its configuration and seed; timestamps
are confined to the `meta` header of metrics files. Exit codes: 0 success,
2 usage error, 3 configuration error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datamix, env, grpo, plots, policy, protocol, rollout
from .config import RunConfig, load_run_config
from .errors import ConfigError, NumericalError
from .zoomtool import ZoomConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


def extract_dotted_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull `--section.key value` (or `--section.key=value`) pairs out of the
    argument list; everything else passes through to argparse."""
    remaining: list[str] = []
    overrides: dict[str, str] = {}
    i = 0
    while i < len(argv):
        token = argv[i]
        if token.startswith("--") and "." in token.split("=", 1)[0]:
            key = token[2:]
            if "=" in key:
                key, value = key.split("=", 1)
            else:
                i += 1
                if i >= len(argv):
                    raise SystemExit(EXIT_USAGE)
                value = argv[i]
            overrides[key] = value
        else:
            remaining.append(token)
        i += 1
    return remaining, overrides


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zoomrl",
        description="Train and probe a tiny zoom-tool policy on the hidden-glyph task.",
    )
    parser.add_argument("--config", help="JSON run-config file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--n", type=_positive_int, default=2000)
    p_gen.add_argument("--seed", type=int, default=None, help="dataset rng seed")
    p_gen.add_argument("--out", default=None)
    p_gen.add_argument("--canvas-format", choices=("inline", "pgm"), default="inline")

    p_cur = sub.add_parser("curate", help="score sample difficulty with k-shot evaluation")
    p_cur.add_argument("--dataset", default=None)
    p_cur.add_argument("--checkpoint", default=None, help="policy to score with (default: fresh init)")
    p_cur.add_argument("--shots", type=_positive_int, default=None)
    p_cur.add_argument("--seed", type=int, default=None)
    p_cur.add_argument("--out", default=None)

    p_train = sub.add_parser("train", help="run the policy-gradient training loop")
    p_train.add_argument("--dataset", default=None)
    p_train.add_argument("--curation", default=None)
    p_train.add_argument("--steps", type=_nonneg_int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out-dir", default=None, help="metrics + figures directory")
    p_train.add_argument("--checkpoint-dir", default=None)
    p_train.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_train.add_argument("--no-figures", action="store_true")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", default=None)
    p_eval.add_argument(
        "--obs-size",
        default=None,
        help="comma-separated observation resolutions to sweep (default: env obs size)",
    )
    p_eval.add_argument("--no-crop-resize", action="store_true")
    p_eval.add_argument("--limit", type=_positive_int, default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out-dir", default=None)

    p_ins = sub.add_parser("inspect", help="dump one episode's transcript and reward")
    p_ins.add_argument("--checkpoint", required=True)
    p_ins.add_argument("--dataset", default=None)
    p_ins.add_argument("--sample-id", type=int, required=True)
    p_ins.add_argument("--seed", type=int, default=0)
    p_ins.add_argument("--temperature", type=float, default=0.0)
    p_ins.add_argument("--inject-bad-call", action="store_true")

    p_rep = sub.add_parser("report", help="render figures from a metrics file")
    p_rep.add_argument("--metrics", required=True, help="metrics.jsonl path")
    p_rep.add_argument("--out-dir", default=None)

    return parser


def _episode_cfg(cfg: RunConfig, **kwargs) -> rollout.EpisodeConfig:
    base = rollout.EpisodeConfig(env=cfg.env, zoom=cfg.zoom, weights=cfg.reward)
    return dataclasses.replace(base, **kwargs)


def _load_params(path: str) -> tuple[policy.PolicyParams, policy.AdamState | None, int | None]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    return policy.load_checkpoint(p)


def _check_compat(params: policy.PolicyParams, cfg: RunConfig) -> None:
    arch = params.arch
    if (
        arch.obs_size != cfg.env.obs_size
        or arch.canvas_size != cfg.env.canvas_size
        or arch.n_symbols != cfg.env.alphabet_size
    ):
        raise ConfigError(
            "checkpoint/dataset mismatch: policy expects "
            f"obs {arch.obs_size}, canvas {arch.canvas_size}, alphabet {arch.n_symbols}; "
            f"environment has obs {cfg.env.obs_size}, canvas {cfg.env.canvas_size}, "
            f"alphabet {cfg.env.alphabet_size}"
        )


def cmd_gen(args: argparse.Namespace, cfg: RunConfig) -> int:
    env_cfg = cfg.env if args.seed is None else dataclasses.replace(cfg.env, rng_seed=args.seed)
    samples = env.generate(env_cfg, args.n)
    out = Path(args.out or cfg.paths.dataset)
    env.save_dataset(out, samples, canvas_format=args.canvas_format)
    by_difficulty: dict[str, int] = {}
    for s in samples:
        by_difficulty[s.difficulty.value] = by_difficulty.get(s.difficulty.value, 0) + 1
    print(f"wrote {len(samples)} samples to {out}")
    for name, count in sorted(by_difficulty.items()):
        print(f"  {name}: {count}")
    hard = [s for s in samples if s.difficulty is env.Difficulty.REQUIRES_ZOOM]
    if len(hard) >= 100:
        zoom_cfg = ZoomConfig(
            crop_size=cfg.zoom.crop_size,
            output_size=(env_cfg.canvas_size, env_cfg.canvas_size),
        )
        global_rate = env.oracle_answer_rate(hard, env.OracleDecoder.GLOBAL_ONLY, env_cfg)
        zoom_rate = env.oracle_answer_rate(
            hard, env.OracleDecoder.ZOOM_AT_TRUTH, env_cfg, zoom_cfg
        )
        chance = 1.0 / env_cfg.alphabet_size
        print(
            f"calibration (zoom-requiring subset, n={len(hard)}): "
            f"observation-only oracle {global_rate:.3f} (chance {chance:.3f}), "
            f"zoom-at-truth oracle {zoom_rate:.3f}"
        )
    return EXIT_OK


def cmd_curate(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_path = Path(args.dataset or cfg.paths.dataset)
    if not dataset_path.exists():
        raise ConfigError(f"dataset not found: {dataset_path}")
    samples = env.load_dataset(dataset_path)
    if args.checkpoint:
        params, _, _ = _load_params(args.checkpoint)
        _check_compat(params, cfg)
    else:
        params = policy.init_params(
            policy.PolicyArch(
                obs_size=cfg.env.obs_size,
                n_symbols=cfg.env.alphabet_size,
                canvas_size=cfg.env.canvas_size,
            ),
            seed=rollout.derive_seed(cfg.seed, 0x1817),
        )
    mix = cfg.mix if args.shots is None else dataclasses.replace(cfg.mix, shots=args.shots)
    seed = cfg.seed if args.seed is None else args.seed
    records = datamix.score_dataset(params, samples, mix, seed, cfg.env)
    out = Path(args.out or cfg.paths.curation)
    datamix.save_records(out, records)
    n_hard = sum(r.bucket is datamix.Bucket.HARD for r in records)
    print(f"wrote {len(records)} curation records to {out}")
    print(f"  hard (< {mix.threshold}): {n_hard}")
    print(f"  easy (>= {mix.threshold}): {len(records) - n_hard}")
    return EXIT_OK


def _weights_for(
    samples: list[env.SyntheticSample],
    curation_path: Path | None,
    mix: datamix.MixPolicy,
) -> np.ndarray | None:
    if curation_path is None:
        return None
    records = datamix.load_records(curation_path)
    by_id = {r.sample_id: r for r in records}
    missing = [s.sample_id for s in samples if s.sample_id not in by_id]
    if missing:
        raise ConfigError(
            f"curation file lacks records for {len(missing)} samples (first: {missing[0]})"
        )
    aligned = [by_id[s.sample_id] for s in samples]
    return datamix.curate(aligned, mix)


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_path = Path(args.dataset or cfg.paths.dataset)
    if not dataset_path.exists():
        raise ConfigError(f"dataset not found: {dataset_path}")
    samples = env.load_dataset(dataset_path)
    curation_path = Path(args.curation) if args.curation else None
    if curation_path is None:
        default_curation = Path(cfg.paths.curation)
        curation_path = default_curation if default_curation.exists() else None
    weights = _weights_for(samples, curation_path, cfg.mix)
    if weights is None:
        print("no curation file; sampling prompts uniformly")

    train_cfg = cfg.train if args.steps is None else dataclasses.replace(cfg.train, steps=args.steps)
    seed = cfg.seed if args.seed is None else args.seed
    if args.resume:
        params, moments, _ = _load_params(args.resume)
        _check_compat(params, cfg)
        if moments is None:
            moments = policy.AdamState.zeros(params.arch.n_params)
    else:
        params = policy.init_params(
            policy.PolicyArch(
                obs_size=cfg.env.obs_size,
                n_symbols=cfg.env.alphabet_size,
                canvas_size=cfg.env.canvas_size,
            ),
            seed=rollout.derive_seed(seed, 0x1817),
        )
        moments = policy.AdamState.zeros(params.arch.n_params)

    episode_cfg = _episode_cfg(cfg)
    ckpt_dir = Path(args.checkpoint_dir or cfg.paths.checkpoints)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    every = max(1, train_cfg.steps // 10) if train_cfg.steps else 1

    def on_step(s: grpo.StepStats) -> None:
        if not args.quiet and (s.step % every == 0 or s.step == train_cfg.steps):
            print(
                f"step {s.step:5d}  reward {s.mean_reward:5.3f}  "
                f"acc {s.accuracy:4.2f}  tool {s.tool_use_rate:4.2f}  lr {s.lr:.2e}"
            )
        if args.checkpoint_every and s.step % args.checkpoint_every == 0:
            policy.save_checkpoint(ckpt_dir / f"ckpt_{s.step:06d}.ckpt", params, moments, seed)

    result = grpo.train(
        samples,
        train_cfg,
        seed,
        episode_cfg,
        weights=weights,
        params=params,
        moments=moments,
        on_step=on_step,
    )

    out_dir = Path(args.out_dir or cfg.paths.metrics)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": seed,
        "config": dataclasses.replace(cfg, train=train_cfg).to_dict(),
    }
    grpo.write_metrics(result.stats, out_dir / "metrics.jsonl", out_dir / "metrics.csv", meta)
    policy.save_checkpoint(ckpt_dir / "final.ckpt", result.params, result.moments, seed)
    if not args.no_figures and result.stats:
        rows = [json.loads(s.to_json()) for s in result.stats]
        for path in plots.render_training_report(rows, out_dir):
            print(f"figure: {path}")

    summary = grpo.final_window_summary(result.stats)
    print(f"metrics: {out_dir / 'metrics.jsonl'} (+ metrics.csv)")
    print(f"checkpoint: {ckpt_dir / 'final.ckpt'} (version {result.params.version})")
    if result.stats:
        tail = result.stats[max(0, int(len(result.stats) * 0.8)) :]
        acc = float(np.mean([s.accuracy for s in tail]))
        tool = float(np.mean([s.tool_use_rate for s in tail]))
        print(
            "final 20% of steps: "
            f"accuracy {acc:.3f}, tool-use rate {tool:.3f}, advantage by category "
            f"tool_success={_fmt(summary['adv_tool_success'])} "
            f"tool_fail={_fmt(summary['adv_tool_fail'])} "
            f"no_tool={_fmt(summary['adv_no_tool'])}"
        )
    return EXIT_OK


def _fmt(value: float | None) -> str:
    return "absent" if value is None else f"{value:+.4f}"


def _parse_obs_sizes(text: str | None, default: int) -> list[int]:
    if not text:
        return [default]
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --obs-size list: {exc}") from exc
    if not sizes:
        raise ConfigError("--obs-size list is empty")
    return sizes


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    params, _, _ = _load_params(args.checkpoint)
    _check_compat(params, cfg)
    dataset_path = Path(args.dataset or cfg.paths.dataset)
    if not dataset_path.exists():
        raise ConfigError(f"dataset not found: {dataset_path}")
    samples = env.load_dataset(dataset_path)
    rows = []
    for obs_res in _parse_obs_sizes(args.obs_size, cfg.env.obs_size):
        if obs_res < 1 or cfg.env.canvas_size % obs_res:
            raise ConfigError(
                f"observation resolution {obs_res} must divide canvas size {cfg.env.canvas_size}"
            )
        episode_cfg = _episode_cfg(
            cfg,
            temperature=0.0,
            obs_resolution=obs_res,
            crop_resize=not args.no_crop_resize,
        )
        report = rollout.evaluate(params, samples, episode_cfg, seed=args.seed, limit=args.limit)
        row = {
            "obs_resolution": obs_res,
            "crop_resize": not args.no_crop_resize,
            "n": report.n,
            "accuracy": report.accuracy,
            "tool_use_rate": report.tool_use_rate,
            "tool_success_rate": report.tool_success_rate,
            "mean_reward": report.mean_reward,
        }
        rows.append(row)
        print(
            f"obs {obs_res:3d}  n {report.n:5d}  accuracy {report.accuracy:.3f}  "
            f"tool-use {report.tool_use_rate:.3f}  tool-success {report.tool_success_rate:.3f}"
            + ("  [crop resize disabled]" if args.no_crop_resize else "")
        )
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        header = list(rows[0].keys())
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in header))
        (out_dir / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        payload = {
            "meta": {"created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "seed": args.seed},
            "rows": rows,
        }
        (out_dir / "eval.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        if len(rows) > 1:
            print(f"figure: {plots.plot_eval_sweep(rows, out_dir / 'resolution_sweep.png')}")
        print(f"eval report: {out_dir / 'eval.csv'}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, cfg: RunConfig) -> int:
    params, _, _ = _load_params(args.checkpoint)
    _check_compat(params, cfg)
    dataset_path = Path(args.dataset or cfg.paths.dataset)
    if not dataset_path.exists():
        raise ConfigError(f"dataset not found: {dataset_path}")
    samples = {s.sample_id: s for s in env.load_dataset(dataset_path)}
    if args.sample_id not in samples:
        raise ConfigError(f"unknown sample id {args.sample_id}")
    sample = samples[args.sample_id]
    episode_cfg = _episode_cfg(uncapped_cfg := cfg, temperature=args.temperature, inject_bad_call=args.inject_bad_call)
    del uncapped_cfg
    traj = rollout.run_episode(params, sample, episode_cfg, args.seed)
    print(protocol.dumps_transcript(traj.transcript), end="")
    print("--- decisions ---")
    for d in traj.decisions:
        if d.kind is policy.DecisionKind.TOOL:
            print(f"turn {d.turn}: tool zoom keypoint={d.keypoint} logprob={d.logprob:.4f}")
        else:
            print(f"turn {d.turn}: answer {d.answer!r} logprob={d.logprob:.4f}")
    print("--- reward ---")
    print(json.dumps(dataclasses.asdict(traj.reward), sort_keys=True))
    print(f"category: {traj.category.value}")
    print(f"ground truth: {sample.glyph_symbol} at ({sample.glyph_center.x},{sample.glyph_center.y})")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    metrics_path = Path(args.metrics)
    if not metrics_path.exists():
        raise ConfigError(f"metrics file not found: {metrics_path}")
    _, rows = grpo.read_metrics_jsonl(metrics_path)
    if not rows:
        raise ConfigError(f"metrics file {metrics_path} has no step rows")
    out_dir = Path(args.out_dir) if args.out_dir else metrics_path.parent
    for path in plots.render_training_report(rows, out_dir):
        print(f"figure: {path}")
    return EXIT_OK


_COMMANDS = {
    "gen": cmd_gen,
    "curate": cmd_curate,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        remaining, overrides = extract_dotted_overrides(argv)
    except SystemExit as exc:
        print("error: dotted override is missing its value", file=sys.stderr)
        return int(exc.code or EXIT_USAGE)
    parser = build_parser()
    args = parser.parse_args(remaining)
    try:
        cfg = load_run_config(args.config, overrides)
        cfg.validate()
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
