"""Command-line front end: ``vnsa {gen,attend,bench,sinks,gates,budget,check}``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .config import RunConfig, parse_config, with_overrides
from .dense import QkvBatch, concat_heads, dense_causal_attention
from .errors import ConfigError
from .gating import BRANCHES, GateParams, ModalitySpans, gates_from_queries, hybrid_forward, nsa_forward
from .tensor import Rng64, load_tensor, matmul, save_tensor, seeded_uniform

# hidden states are drawn in [-1, 1); projections are rescaled by 1/sqrt(width)
HIDDEN_SCALE = 20.0
PROJ_SCALE = 20.0


@dataclass
class Fixtures:
    X: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    batch: QkvBatch
    gates: list        # GateParams per layer
    spans: ModalitySpans


def generate_fixtures(cfg: RunConfig) -> Fixtures:
    """Seeded hidden states, square-width projections, Q/K/V and gate parameters.

    Draw order from splitmix64(seed): X, W_q, W_k, W_v, then W1, b1, W2, b2
    for each gate layer.
    """
    rng = Rng64(cfg.seed)
    D = cfg.width
    wscale = np.float32(PROJ_SCALE / np.sqrt(D))
    X = seeded_uniform(rng, (cfg.L, D)) * np.float32(HIDDEN_SCALE)
    Wq = seeded_uniform(rng, (D, cfg.h * cfg.d_k)) * wscale
    Wk = seeded_uniform(rng, (D, cfg.g * cfg.d_k)) * wscale
    Wv = seeded_uniform(rng, (D, cfg.g * cfg.d_k)) * wscale

    def heads(proj, count):
        return matmul(X, proj).reshape(cfg.L, count, cfg.d_k).transpose(1, 0, 2)

    batch = QkvBatch(heads(Wq, cfg.h), heads(Wk, cfg.g), heads(Wv, cfg.g))
    gates = [GateParams.seeded(rng, D, D, cfg.h, scale=float(wscale)) for _ in range(cfg.layers)]
    return Fixtures(X, Wq, Wk, Wv, batch, gates, cfg.spans())


def write_fixtures(fx: Fixtures, directory) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create fixture directory {directory}: {exc}") from exc
    written = []
    for name, arr in (("X", fx.X), ("Wq", fx.Wq), ("Wk", fx.Wk), ("Wv", fx.Wv),
                      ("Q", fx.batch.Q), ("K", fx.batch.K), ("V", fx.batch.V),
                      ("spans", fx.spans.to_array())):
        save_tensor(directory / f"{name}.vnsa", arr)
        written.append(directory / f"{name}.vnsa")
    for li, params in enumerate(fx.gates):
        params.save(directory / f"gate{li}")
        written += [directory / f"gate{li}" / f"{n}.vnsa" for n in ("W1", "b1", "W2", "b2")]
    return written


def load_fixtures(cfg: RunConfig, directory, need_gates: bool = True):
    """Load Q/K/V, spans and gate layers, checking them against ``cfg``."""
    directory = Path(directory)
    for name in ("Q", "K", "V"):
        if not (directory / f"{name}.vnsa").exists():
            raise ConfigError(f"missing fixture {directory / (name + '.vnsa')}; run `vnsa gen` first")
    batch = QkvBatch(*(load_tensor(directory / f"{n}.vnsa") for n in ("Q", "K", "V")))
    expect_q = (cfg.h, cfg.L, cfg.d_k)
    expect_k = (cfg.g, cfg.L, cfg.d_k)
    if batch.Q.shape != expect_q or batch.K.shape != expect_k:
        raise ConfigError(f"fixtures Q{batch.Q.shape}/K{batch.K.shape} do not match config "
                          f"Q{expect_q}/K{expect_k}")
    spans_path = directory / "spans.vnsa"
    spans = ModalitySpans.from_array(load_tensor(spans_path)) if spans_path.exists() else cfg.spans()
    if spans.L != cfg.L:
        raise ConfigError(f"span fixture covers {spans.L} tokens, config says {cfg.L}")
    gates = []
    if need_gates:
        li = 0
        while (directory / f"gate{li}").is_dir():
            gates.append(GateParams.load(directory / f"gate{li}"))
            li += 1
        if not gates:
            raise ConfigError(f"no gate parameters under {directory}")
        for params in gates:
            if params.d_in != cfg.width or params.heads != cfg.h:
                raise ConfigError(f"gate parameters expect width {params.d_in} and {params.heads} heads, "
                                  f"config has {cfg.width} and {cfg.h}")
    return batch, spans, gates


# -- commands -----------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    fx = generate_fixtures(cfg)
    paths = write_fixtures(fx, cfg.fixtures)
    print(f"wrote {len(paths)} fixture files to {cfg.fixtures}")
    return 0


def cmd_attend(cfg: RunConfig) -> int:
    batch, spans, gate_layers = load_fixtures(cfg, cfg.fixtures)
    layout, sparse = cfg.layout, cfg.sparse
    gates = gates_from_queries(batch.Q, gate_layers[0])
    rows, per_head, trace = hybrid_forward(batch, layout, sparse, gates, spans)
    dense_rows = concat_heads(list(dense_causal_attention(batch, layout)))

    vis = spans.positions0("vision")
    metrics = [("tokens", batch.L), ("vision_tokens", len(vis)), ("text_tokens", batch.L - len(vis))]
    for b, name in enumerate(BRANCHES):
        metrics.append((f"gate_mean_{name}", float(gates[vis, :, b].mean()) if len(vis) else 0.0))
    counts = trace.counts[0].as_dict() if trace else dict.fromkeys(("cmp_scores", "slc_scores",
                                                                    "slc_attended", "win_attended"), 0)
    metrics += list(counts.items())
    metrics.append(("max_abs_dev_output_vs_dense",
                    float(np.abs(rows.astype(np.float64) - dense_rows).max())))
    if trace is not None:
        sub = batch.subsequence(vis)
        ref = dense_causal_attention(sub, layout).astype(np.float64)
        Lv = len(vis)
        boundary = np.arange(cfg.s, Lv + 1, cfg.s) - 1
        slc_dev = np.abs(trace.branch_out[1][:, boundary] - ref[:, boundary]).max() if len(boundary) else 0.0
        metrics.append(("max_abs_dev_slc_vs_dense_at_block_ends", float(slc_dev)))
        metrics.append(("max_abs_dev_win_vs_dense", float(np.abs(trace.branch_out[2] - ref).max())))

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "attn_out.vnsa", rows)
    save_tensor(out / "dense_out.vnsa", dense_rows)
    analysis.write_csv(out / "summary.csv", ("metric", "value"), metrics)
    for k, v in metrics:
        print(f"{k} = {v}")
    return 0


def cmd_bench(cfg: RunConfig, lengths, timing: bool = True) -> int:
    from .dense import HeadLayout

    if list(lengths) != sorted(lengths):
        raise ConfigError(f"--lengths must be ascending, got {lengths}")
    report = analysis.profile_branches(lengths, cfg.sparse, HeadLayout(1, 1, cfg.bench_head_dim),
                                       seed=cfg.seed, timing=timing, strict=False)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_bytes_atomic(out / "cost.csv", analysis.cost_csv(report).encode("utf-8"))
    print(f"{'L':>8} {'branch':>13} {'analytic':>12} {'measured':>12} {'wall_ms':>10}")
    for r in report.rows:
        print(f"{r.L:>8} {r.branch:>13} {r.analytic_count:>12} {r.measured_count:>12} {r.wall_ns / 1e6:>10.2f}")
    print(f"largest analytic count at L={max(lengths)}: {report.dominant_branch()}")
    if timing:
        print(f"slowest stage (wall clock, informational): {report.slowest_branch()}")
    bad = report.mismatches()
    if bad:
        for r in bad:
            print(f"COUNT MISMATCH L={r.L} {r.branch}: measured {r.measured_count} != {r.analytic_count}",
                  file=sys.stderr)
        return 1
    return 0


def cmd_sinks(cfg: RunConfig) -> int:
    batch, _, _ = load_fixtures(cfg, cfg.fixtures, need_gates=False)
    maps = analysis.attention_maps(batch, cfg.layout, cfg.sparse)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for source, amap in maps.items():
        if amap.vnorm.size == 0:
            summary.append((source, 0, 0, 0.0))
            continue
        report = analysis.sink_report(amap)
        analysis.write_bytes_atomic(out / f"sinks_{source}.csv", analysis.sink_csv(report).encode("utf-8"))
        summary.append((source, len(report.is_sink), report.count, report.ratio))
        print(f"{source:>6}: {report.count} sinks / {len(report.is_sink)} keys (ratio {report.ratio:.4f})")
    analysis.write_csv(out / "sinks_summary.csv", ("source", "keys", "sinks", "sink_ratio"), summary)
    return 0


def cmd_gates(cfg: RunConfig) -> int:
    batch, _, gate_layers = load_fixtures(cfg, cfg.fixtures)
    values = [gates_from_queries(batch.Q, p) for p in gate_layers]
    stats = analysis.gate_statistics(values)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_bytes_atomic(out / "gates.csv", analysis.gate_csv(stats).encode("utf-8"))
    for layer, branch, mean, spread, corr in stats.rows():
        print(f"layer {layer} {branch}: mean={mean:.4f} iqr={spread:.4f} inter_head_corr={corr:.4f}")
    return 0


def budget_lines(b: int, s: int, w: int, L: int) -> list[str]:
    k = analysis.attention_budget(b, s, w)
    gamma = analysis.attention_fraction(b, s, w, L)
    lines = [f"L = {L}", f"K_attn = {k}", f"gamma = {100 * gamma:#.4g}%"]
    lines.append(f"alpha_local = {analysis.local_ratio(b, s, w):#.4g}" if k else "alpha_local = undefined")
    return lines


def cmd_budget(b: int, s: int, w: int, L: int | None, frames: int | None, tpf: int | None) -> int:
    if frames is not None or tpf is not None:
        if frames is None or tpf is None:
            raise ConfigError("--frames and --tpf must be given together")
        from_frames = analysis.info_context_length(tpf, frames)
        if L is not None and L != from_frames:
            raise ConfigError(f"L = {L} conflicts with --tpf * --frames = {from_frames}")
        L = from_frames
    if L is None:
        L = 128000
    for line in budget_lines(b, s, w, L):
        print(line)
    return 0


def cmd_check(tolerance_scale: float = 1.0) -> int:
    from .checks import run_checks

    results = run_checks(tolerance_scale=tolerance_scale)
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail and not ok else ""))
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return 0 if failed == 0 else 1


# -- argument parsing ----------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory for reports and tensors")
    common.add_argument("--fixtures", metavar="DIR", help="fixture directory")

    parser = argparse.ArgumentParser(prog="vnsa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write seeded Q/K/V, gate and span fixtures")
    sub.add_parser("attend", parents=[common], help="run the hybrid attention layer on fixtures")
    bench = sub.add_parser("bench", parents=[common], help="per-branch operation counts and timings")
    bench.add_argument("--lengths", type=_int_list, default=[1024, 2048, 4096, 8192])
    bench.add_argument("--no-timing", action="store_true", help="skip wall-clock timing (wall_ns = 0)")
    sub.add_parser("sinks", parents=[common], help="attention-sink reports per attention source")
    sub.add_parser("gates", parents=[common], help="gate mean / IQR / inter-head correlation")
    budget = sub.add_parser("budget", parents=[common], help="attention budget and fraction")
    budget.add_argument("b", type=int, nargs="?", default=32)
    budget.add_argument("s", type=int, nargs="?", default=64)
    budget.add_argument("w", type=int, nargs="?", default=256)
    budget.add_argument("L", type=int, nargs="?")
    budget.add_argument("--frames", type=int)
    budget.add_argument("--tpf", type=int)
    check = sub.add_parser("check", parents=[common], help="run the built-in invariant suite")
    check.add_argument("--tolerance-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = parse_config(text)
    return with_overrides(cfg, seed=args.seed, out=args.out, fixtures=args.fixtures)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "budget":
            return cmd_budget(args.b, args.s, args.w, args.L, args.frames, args.tpf)
        if args.command == "check":
            return cmd_check(args.tolerance_scale)
        cfg = load_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "attend":
            return cmd_attend(cfg)
        if args.command == "bench":
            return cmd_bench(cfg, args.lengths, timing=not args.no_timing)
        if args.command == "sinks":
            return cmd_sinks(cfg)
        if args.command == "gates":
            return cmd_gates(cfg)
    except (ValueError, OSError) as exc:
        print(f"vnsa {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
