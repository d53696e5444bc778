"""Command-line interface.

Subcommands: ``verify`` runs the quick self-checks, ``bench-prefill`` times
prefill plus head strategies and writes a CSV report with a companion PNG,
``capacity`` evaluates the analytic memory model, ``pack`` demonstrates
sequence packing on seeded samples, and ``tile`` shows the dynamic tile grid
for an image extent.  A plain ``key=value`` config file can provide defaults
for any flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .capacity import CapacityModel
from .errors import ConfigError, EngineError
from .harness import BenchSpec, bench_prefill, capacity_report, run_verify
from .packing import PackingMode, Sample, pack_samples, write_packed
from .vision import select_tile_grid

_CONFIG_INT_KEYS = {
    "seq_len", "frames", "chunk_len", "workers", "reps", "vocab_size", "seed",
    "memory_budget", "budget_per_worker", "act_bytes_per_token", "bytes_per_logit",
    "fixed_bytes", "target_len", "samples", "sources", "max_tiles", "width", "height",
}
_CONFIG_STR_KEYS = {"head", "transport", "mode", "out"}


def load_config(path) -> dict:
    """Parse a plain key=value file; blank lines and # comments are skipped."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in _CONFIG_INT_KEYS:
                values[key] = int(value)
            elif key in _CONFIG_STR_KEYS:
                values[key] = value
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return values


def _setting(args, config: dict, key: str, default):
    """Flag if given, else config file, else the built-in default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def cmd_verify(args) -> int:
    results = run_verify()
    for result in results:
        if result.passed:
            print(f"PASS {result.name}")
        else:
            print(f"FAIL {result.name}: {result.detail}")
    failed = sum(1 for r in results if not r.passed)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench_prefill(args) -> int:
    config = load_config(args.config) if args.config else {}
    spec = BenchSpec(
        seq_len=_setting(args, config, "seq_len", None),
        frames=_setting(args, config, "frames", None),
        head=_setting(args, config, "head", "full"),
        chunk_len=_setting(args, config, "chunk_len", 32_768),
        world_size=_setting(args, config, "workers", 1),
        transport=_setting(args, config, "transport", "inproc"),
        reps=_setting(args, config, "reps", 5),
        vocab_size=_setting(args, config, "vocab_size", 32_768),
        seed=_setting(args, config, "seed", 0),
        memory_budget=_setting(args, config, "memory_budget", None),
        out=_setting(args, config, "out", None),
    )
    rows = bench_prefill(spec)
    for row in rows:
        if row["status"] == "oom":
            print(f"rep {row['rep']}: over budget, needs {row['peak_logit_rows']} logit rows")
        else:
            print(
                f"rep {row['rep']}: {row['wall_time_s']:.3f}s, "
                f"peak logit rows {row['peak_logit_rows']}, frames {row['frames_sent']}"
            )
    timed = sorted(float(r["wall_time_s"]) for r in rows if r["status"] == "ok")
    if timed:
        print(f"median {timed[len(timed) // 2]:.3f}s over {len(timed)} rep(s), "
              f"cv {float(rows[0]['cv_wall_time']):.3f}")
    if spec.out:
        print(f"wrote {spec.out} and its figure")
    return 0


def cmd_capacity(args) -> int:
    config = load_config(args.config) if args.config else {}
    model = CapacityModel(
        vocab_size=_setting(args, config, "vocab_size", 100_000),
        bytes_per_logit=_setting(args, config, "bytes_per_logit", 4),
        act_bytes_per_token=_setting(args, config, "act_bytes_per_token", 126_000),
        budget_per_worker=_setting(args, config, "budget_per_worker", 6_300_400_000),
        fixed_bytes=_setting(args, config, "fixed_bytes", 0),
    )
    workers = [int(w) for w in args.workers.split(",")]
    rows = capacity_report(model, workers, out=_setting(args, config, "out", None))
    for row in rows:
        print(
            f"{row['strategy']:>6} head, {row['workers']:>3} workers: "
            f"max context {row['max_context']:,} tokens"
        )
    return 0


def cmd_pack(args) -> int:
    rng = np.random.default_rng(args.seed)
    samples = []
    for i in range(args.samples):
        length = int(rng.integers(1, max(2, min(args.target_len, 32) + 1)))
        tokens = rng.integers(3, 99, size=length)
        samples.append(Sample(tokens=tuple(int(t) for t in tokens),
                              source_id=i % args.sources))
    packs = pack_samples(samples, args.target_len, PackingMode(args.mode))
    total_pad = 0
    for i, pack in enumerate(packs):
        total_pad += pack.pad_count
        print(
            f"pack {i}: {len(pack.sample_spans)} sample(s), "
            f"{pack.target_len - pack.pad_count} tokens, {pack.pad_count} pad"
        )
    used = args.samples and 1 - total_pad / (len(packs) * args.target_len)
    print(f"{len(packs)} pack(s), fill {used:.1%}")
    if args.out:
        write_packed(packs, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_tile(args) -> int:
    grid = select_tile_grid(args.width, args.height, args.max_tiles)
    tokens = grid.tile_count * 256
    thumb = "with thumbnail" if grid.include_thumbnail else "no thumbnail"
    print(f"grid {grid.rows}x{grid.cols} ({thumb}), {grid.tile_count} tiles, "
          f"{tokens} visual tokens")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longctx",
        description="Long-context inference engine: ring attention, head "
                    "strategies, packing, tiling, and capacity analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("verify", help="run fast self-checks").set_defaults(fn=cmd_verify)

    bench = sub.add_parser("bench-prefill", help="time prefill plus one head strategy")
    bench.add_argument("--seq-len", dest="seq_len", type=int)
    bench.add_argument("--frames", type=int, help="video frames; 256 tokens each")
    bench.add_argument("--head", choices=("full", "chunked", "masked"))
    bench.add_argument("--chunk-len", dest="chunk_len", type=int)
    bench.add_argument("--workers", type=int)
    bench.add_argument("--transport", choices=("inproc", "tcp"))
    bench.add_argument("--reps", type=int)
    bench.add_argument("--vocab", dest="vocab_size", type=int)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--budget", dest="memory_budget", type=int,
                       help="bytes allowed for live logit rows")
    bench.add_argument("--config", help="key=value defaults file")
    bench.add_argument("--out", help="CSV path; a PNG lands next to it")
    bench.set_defaults(fn=cmd_bench_prefill)

    cap = sub.add_parser("capacity", help="evaluate the analytic memory model")
    cap.add_argument("--workers", default="8,16,32",
                     help="comma-separated worker counts")
    cap.add_argument("--budget", dest="budget_per_worker", type=int)
    cap.add_argument("--vocab", dest="vocab_size", type=int)
    cap.add_argument("--act-bytes", dest="act_bytes_per_token", type=int)
    cap.add_argument("--bytes-per-logit", dest="bytes_per_logit", type=int)
    cap.add_argument("--fixed-bytes", dest="fixed_bytes", type=int)
    cap.add_argument("--config", help="key=value defaults file")
    cap.add_argument("--out", help="CSV path; a PNG lands next to it")
    cap.set_defaults(fn=cmd_capacity)

    pack = sub.add_parser("pack", help="pack seeded demo samples")
    pack.add_argument("--target-len", dest="target_len", type=int, required=True)
    pack.add_argument("--mode", choices=("reset", "shared"), required=True)
    pack.add_argument("--samples", type=int, default=16)
    pack.add_argument("--sources", type=int, default=2)
    pack.add_argument("--seed", type=int, default=0)
    pack.add_argument("--out", help="write the packed text format here")
    pack.set_defaults(fn=cmd_pack)

    tile = sub.add_parser("tile", help="show the tile grid for an image extent")
    tile.add_argument("--width", type=int, required=True)
    tile.add_argument("--height", type=int, required=True)
    tile.add_argument("--max-tiles", dest="max_tiles", type=int, default=12)
    tile.set_defaults(fn=cmd_tile)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
