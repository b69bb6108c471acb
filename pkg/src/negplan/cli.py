"""``negplan`` command-line interface.

Verbs: gen, csp, train {sft1,sft2,grpo}, eval, report.  Global flags
(--config, --seed, --out-dir, --threads) may appear before or after the verb.
Configuration precedence: defaults < --config file < NEGPLAN_* environment
variables < --seed/--threads flags.

Exit codes: 0 success, 1 training diverged, 2 I/O error, 3 parse error
(including invalid configuration and empty datasets), 4 stage precedence
violated, 5 checkpoint shape mismatch.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from collections import Counter
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as cfgmod
from . import plots
from .csp import CspRecord, build_dataset, counterfactual_uplift, label_scene
from .grpo import train_grpo
from .io import atomic_write_text
from .metrics import EvalReport
from .pipeline import SCENE_CSV_COLUMNS, evaluate_policy, scene_row, scene_suite
from .policy import DivergenceError, PolicyParams, ShapeMismatch, dumps_params, loads_params
from .scenario import Scene, dumps_record
from .sft import train_stage1, train_stage2

EXIT_OK, EXIT_DIVERGED, EXIT_IO, EXIT_PARSE, EXIT_PRECEDENCE, EXIT_SHAPE = 0, 1, 2, 3, 4, 5

# mode -> stage tag its input checkpoint must carry (None: starts from fresh weights)
PREREQUISITE = {"sft1": None, "sft2": "sft1", "grpo": "sft2"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# file helpers


def _write_text(path: Path, text: str) -> None:
    try:
        atomic_write_text(path, text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from None


def _write_bytes(path: Path, data: bytes) -> None:
    from .io import atomic_write_bytes

    try:
        atomic_write_bytes(path, data)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from None


def _read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from None


def _parse_lines(path: Path, parse: Callable[[dict], object]) -> list:
    """Parse a JSONL file; any bad line is reported with its 1-based number."""
    out = []
    for no, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(parse(json.loads(line)))
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            detail = exc.args[0] if exc.args else type(exc).__name__
            raise CliError(EXIT_PARSE, f"{path}: line {no}: malformed record ({detail})") from None
    return out


def _jsonl(rows: Sequence[dict]) -> str:
    return "".join(dumps_record(r) + "\n" for r in rows)


def _load_checkpoint(path: Path) -> tuple[PolicyParams, str]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    try:
        return loads_params(data)
    except ShapeMismatch as exc:
        raise CliError(EXIT_SHAPE, f"{path}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


@dataclasses.dataclass(frozen=True)
class Context:
    config: cfgmod.RunConfig
    out_dir: Path

    def path(self, name: str) -> Path:
        return self.config.paths.resolve(name, self.out_dir)

    def checkpoint(self, stem: str) -> Path:
        return self.path("checkpoints") / f"{stem}.ckpt"

    def trace(self, stem: str) -> Path:
        return self.path("traces") / f"{stem}.jsonl"


def _label_table(scenes: Sequence[Scene]) -> str:
    counts = Counter((s.template.value, label_scene(s).value.value) for s in scenes)
    templates = sorted({t for t, _ in counts})
    lines = [f"  {t:<11} Pos {counts[t, 'Pos']:>4}  Neg {counts[t, 'Neg']:>4}" for t in templates]
    return "\n".join(lines) if lines else "  (no scenes)"


def cmd_gen(ctx: Context, args) -> int:
    sc = ctx.config.scenes
    for split, n, offset in (("train", sc.train_count, sc.train_seed_offset),
                             ("holdout", sc.holdout_count, sc.holdout_seed_offset)):
        scenes = scene_suite(sc.templates, n, offset)
        path = ctx.path(f"scenes_{split}")
        _write_text(path, _jsonl([s.to_dict() for s in scenes]))
        print(f"gen {split}: {len(scenes)} scenes -> {path}")
        print(_label_table(scenes))
    return EXIT_OK


def _csp_summary(name: str, records: Sequence[CspRecord]) -> str:
    neg = [r for r in records if r.is_neg]
    uplift = [counterfactual_uplift(r) for r in neg]
    shown = f"{float(np.mean(uplift)):.4f}" if uplift else "n/a"
    return (f"csp {name}: {len(records)} records, Pos {len(records) - len(neg)}, Neg {len(neg)}, "
            f"mean counterfactual PDMS uplift {shown}")


def cmd_csp(ctx: Context, args) -> int:
    if args.scenes:
        if not args.output:
            raise CliError(EXIT_PARSE, "--scenes requires --output")
        jobs = [("custom", Path(args.scenes), Path(args.output))]
    else:
        jobs = [(s, ctx.path(f"scenes_{s}"), ctx.path(f"csp_{s}")) for s in ("train", "holdout")]
    for name, src, dst in jobs:
        scenes = _parse_lines(src, Scene.from_dict)
        records = build_dataset(scenes, workers=ctx.config.csp.workers)
        _write_text(dst, _jsonl([r.to_dict() for r in records]))
        print(_csp_summary(name, records))
    return EXIT_OK


def _read_records(path: Path) -> list[CspRecord]:
    return _parse_lines(path, CspRecord.from_dict)


def cmd_train(ctx: Context, args) -> int:
    mode = args.mode
    need = PREREQUISITE[mode]
    if need is None:
        params = PolicyParams.init(ctx.config.seed)
    else:
        src = Path(args.checkpoint_in) if args.checkpoint_in else ctx.checkpoint(need)
        if not src.exists():
            raise CliError(EXIT_PRECEDENCE, f"{mode} needs a {need} checkpoint; {src} not found")
        params, stage = _load_checkpoint(src)
        if stage != need:
            raise CliError(EXIT_PRECEDENCE, f"{mode} needs a {need} checkpoint; {src} is tagged {stage!r}")
    records = _read_records(Path(args.dataset) if args.dataset else ctx.path("csp_train"))
    stem = args.tag or mode
    rows: list[dict] = []
    trainers = {
        "sft1": lambda p: train_stage1(records, p, ctx.config.sft, rows.append),
        "sft2": lambda p: train_stage2(records, p, ctx.config.sft, rows.append),
        "grpo": lambda p: train_grpo(records, p, ctx.config.grpo, rows.append),
    }
    try:
        params = trainers[mode](params)
    except DivergenceError as exc:
        _write_text(ctx.trace(stem), _jsonl(rows))
        raise CliError(EXIT_DIVERGED, f"{mode} diverged after {len(rows)} steps: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"{mode}: {exc}") from None
    _write_bytes(ctx.checkpoint(stem), dumps_params(params, mode))
    _write_text(ctx.trace(stem), _jsonl(rows))
    print(f"train {mode}: {len(rows)} steps -> {ctx.checkpoint(stem)}")
    return EXIT_OK


def _summary_table(report: EvalReport) -> str:
    cols = ("pdms", "nc", "dac", "ep", "ttc", "comfort", "l2_1s", "l2_4s", "fde", "coll_rate")
    vals = report.csv_values()[: len(cols)]
    head = " ".join(f"{c:>9}" for c in cols)
    body = " ".join(f"{v:>9.4f}" for v in vals)
    return f"{head}\n{body}\n(n = {report.sample_count})"


def cmd_eval(ctx: Context, args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else ctx.checkpoint("grpo")
    params, stage = _load_checkpoint(ckpt)
    records = _read_records(Path(args.dataset) if args.dataset else ctx.path("csp_holdout"))
    if not records:
        raise CliError(EXIT_PARSE, "evaluation dataset is empty")
    report, rows = evaluate_policy(params, records)
    stem = f"eval-{args.tag or ckpt.stem}"
    out = ctx.path("reports")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCENE_CSV_COLUMNS)
    for r in rows:
        w.writerow([v if isinstance(v, str) else repr(float(v)) for v in scene_row(r)])
    _write_text(out / f"{stem}.csv", buf.getvalue())
    _write_text(out / f"{stem}-summary.csv", report.to_csv())
    try:
        plots.histogram(out / f"{stem}-pdms.svg", [r.pdms for r in rows], f"PDMS per scene ({stage})", "PDMS")
        plots.bar_plot(out / f"{stem}-subscores.svg", ["NC", "DAC", "EP", "TTC", "C", "PDMS"],
                       [report.nc, report.dac, report.ep, report.ttc, report.comfort, report.mean_pdms],
                       f"Mean sub-scores ({stage})", "score")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write plots: {exc}") from None
    print(f"eval {ckpt} [{stage}] on {len(records)} scenes")
    print(_summary_table(report))
    return EXIT_OK


def _by_epoch(rows: Sequence[dict], key: str, reduce=np.mean) -> list[float]:
    epochs = sorted({r["epoch"] for r in rows})
    return [float(reduce([r[key] for r in rows if r["epoch"] == e])) for e in epochs]


def _report_trace(name: str, rows: list[dict], out: Path) -> list[str]:
    md = [f"## {name}", ""]
    if not rows:
        return md + ["empty trace", ""]
    md.append(f"steps: {len(rows)}")
    if rows[0].get("stage") == "grpo":
        reward = [r["mean_sampled_reward"] for r in rows]
        plots.line_plot(out / f"{name}-reward.svg",
                        {"mean sampled reward": reward, "smoothed": plots.smooth(reward, 50)},
                        "GRPO group reward", "step", "reward")
        plots.line_plot(out / f"{name}-loss.svg", {"loss": [r["loss"] for r in rows]},
                        "GRPO loss", "step", "loss")
        per_epoch_reward = _by_epoch(rows, "mean_sampled_reward")
        refined = _by_epoch(rows, "refined_count", np.sum)
        triggered = _by_epoch(rows, "triggered", np.sum)
        plots.bar_plot(out / f"{name}-refined.svg", [str(i) for i in range(len(refined))], refined,
                       "Refined samples per epoch", "count")
        md += ["", "| epoch | mean sampled reward | triggered | refined |", "|---|---|---|---|"]
        md += [f"| {e} | {r:.4f} | {int(t)} | {int(k)} |"
               for e, (r, t, k) in enumerate(zip(per_epoch_reward, triggered, refined))]
        md += ["", f"![reward]({name}-reward.svg) ![loss]({name}-loss.svg) ![refined]({name}-refined.svg)"]
    else:
        plots.line_plot(out / f"{name}-loss.svg",
                        {k: [r[k] for r in rows] for k in ("loss_total", "loss_text", "loss_traj")},
                        f"{rows[0].get('stage', name)} losses", "step", "loss")
        plots.line_plot(out / f"{name}-alpha.svg", {"alpha": [r["alpha"] for r in rows]},
                        "trajectory-loss scale", "step", "alpha")
        last = rows[-1]
        md += [f"final loss_total: {last['loss_total']:.6f} (text {last['loss_text']:.6f}, "
               f"traj {last['loss_traj']:.6f})",
               f"alpha: mean {np.mean([r['alpha'] for r in rows]):.4f}, "
               f"min {min(r['alpha'] for r in rows):.4f}, max {max(r['alpha'] for r in rows):.4f}",
               "", f"![loss]({name}-loss.svg) ![alpha]({name}-alpha.svg)"]
    return md + [""]


def cmd_report(ctx: Context, args) -> int:
    traces = [Path(t) for t in args.traces]
    if not traces:
        tdir = ctx.path("traces")
        traces = sorted(tdir.glob("*.jsonl")) if tdir.is_dir() else []
        if not traces:
            raise CliError(EXIT_IO, f"no trace files found in {tdir}")
    out = ctx.path("reports")
    md = ["# Training report", ""]
    for t in traces:
        rows = _parse_lines(t, dict)
        try:
            md += _report_trace(t.stem, rows, out)
        except KeyError as exc:
            raise CliError(EXIT_PARSE, f"{t}: trace rows lack field {exc.args[0]!r}") from None
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write plots: {exc}") from None
    _write_text(out / "report.md", "\n".join(md))
    print(f"report: {len(traces)} trace(s) -> {out / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=d, help="overrides the configured seed")
    parser.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else ".",
                        help="base directory for relative paths (default: .)")
    parser.add_argument("--threads", type=int, default=d, help="worker processes for CSP labelling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="negplan", description=__doc__.split("\n")[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("gen", parents=[common], help="generate train and holdout scene files")

    p = sub.add_parser("csp", parents=[common], help="label scenes and build CSP records")
    p.add_argument("--scenes", help="scene file (default: both configured splits)")
    p.add_argument("--output", help="record file for --scenes")

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("mode", choices=tuple(PREREQUISITE))
    p.add_argument("--dataset", help="CSP record file (default: configured train split)")
    p.add_argument("--checkpoint-in", help="input checkpoint (default: previous stage's output)")
    p.add_argument("--tag", help="output name for checkpoint and trace (default: mode)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file (default: grpo checkpoint)")
    p.add_argument("--dataset", help="CSP record file (default: configured holdout split)")
    p.add_argument("--tag", help="report file stem (default: checkpoint stem)")

    p = sub.add_parser("report", parents=[common], help="summarise training traces")
    p.add_argument("traces", nargs="*", help="trace files (default: every trace in the traces dir)")
    return parser


COMMANDS = {"gen": cmd_gen, "csp": cmd_csp, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = cfgmod.resolve(args.config, seed=args.seed)
        except FileNotFoundError as exc:
            raise CliError(EXIT_IO, str(exc)) from None
        except cfgmod.ConfigError as exc:
            raise CliError(EXIT_PARSE, f"invalid configuration: {exc}") from None
        if args.threads is not None:
            if args.threads < 1:
                raise CliError(EXIT_PARSE, "--threads must be >= 1")
            cfg = dataclasses.replace(cfg, csp=cfgmod.CspSettings(workers=args.threads))
        return COMMANDS[args.verb](Context(cfg, Path(args.out_dir)), args)
    except CliError as exc:
        print(f"negplan: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
