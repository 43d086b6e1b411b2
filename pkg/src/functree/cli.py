"""Command-line entry point: convert, verify, simulate, sweep, replay.

Exit codes: 0 ok, 2 I/O, 3 format validation, 4 scenario validation,
5 simulation failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import blockstore, workload
from .blockstore import BlockStoreError
from .experiments import AXES, SimulationFailed, run_burst, run_manifest, sweep, sweep_csv, write_outputs
from .provision import POLICIES, PhaseError
from .replay import replay, timeline_csv
from .scenario import ScenarioError, load_scenario
from .simnet import SimError
from .wire import WireError

EXIT_OK, EXIT_IO, EXIT_FORMAT, EXIT_SCENARIO, EXIT_SIM = 0, 2, 3, 4, 5


def _size(text: str) -> int:
    t = text.strip().upper()
    mult = 1
    for suffix, m in (("KIB", 1024), ("MIB", 1 << 20), ("K", 1024), ("M", 1 << 20)):
        if t.endswith(suffix):
            t, mult = t[: -len(suffix)], m
            break
    return int(float(t) * mult)


def _ranges(text: str):
    out = []
    for part in filter(None, text.split(",")):
        off, _, length = part.partition(":")
        out.append((int(off), int(length)))
    return out


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# ------------------------------------------------------------ commands
def cmd_convert(args) -> int:
    data = Path(args.input).read_bytes()
    ranges = _ranges(args.startup_ranges) if args.startup_ranges else []
    if args.startup_fraction and not ranges and data:
        ranges = blockstore.startup_prefix(len(data), args.startup_fraction)
    bf, manifest = blockstore.convert(data, args.block_size, args.codec,
                                      args.image_id or Path(args.input).stem, ranges)
    prefix = Path(args.out_prefix) if args.out_prefix else Path(args.input)
    if args.out and not Path(prefix).is_absolute():
        prefix = Path(args.out) / prefix.name
    prefix.parent.mkdir(parents=True, exist_ok=True)
    fnbf = prefix.with_name(prefix.name + ".fnbf")
    mpath = prefix.with_name(prefix.name + ".manifest.json")
    bf.write(fnbf)
    mpath.write_text(manifest.to_json(), encoding="utf-8")
    _say(args, f"{fnbf}: {manifest.n_blocks} blocks of {manifest.block_size} B, "
               f"{manifest.uncompressed_size} -> {manifest.compressed_size} B, "
               f"sha256 {manifest.content_digest.hex()}")
    return EXIT_OK


def cmd_verify(args) -> int:
    path = Path(args.file)
    raw = path.read_bytes()
    manifest = None
    mpath = Path(args.manifest) if args.manifest else path.with_name(
        path.name.removesuffix(".fnbf") + ".manifest.json")
    if mpath.exists():
        manifest = blockstore.Manifest.from_json(mpath.read_text(encoding="utf-8"))
    elif args.manifest:
        raise FileNotFoundError(mpath)
    if blockstore.verify(raw, manifest):
        _say(args, "OK")
        return EXIT_OK
    print(f"FAIL {path}: content does not match its digest", file=sys.stderr)
    return EXIT_FORMAT


def _scenario(args):
    scn = load_scenario(args.scenario, seed=args.seed)
    if getattr(args, "policy", None):
        scn = scn.replace(policy=args.policy)
        scn.validate()
    return scn


def _out(args) -> Path:
    return Path(args.out or "out")


def cmd_simulate(args) -> int:
    scn = _scenario(args)
    res = run_burst(scn)
    paths = write_outputs(_out(args), res)
    s = res.summary()
    _say(args, f"{scn.policy}: {len(res.sessions)} sessions, mean {s['mean_provision_latency_s']:.3f} s, "
               f"makespan {s['makespan_s']:.3f} s, registry egress {s['registry_egress_bytes']} B "
               f"-> {paths['summary.csv'].parent}")
    if res.failed and not scn.faults:
        print(f"{len(res.failed)} sessions failed", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK


def cmd_sweep(args) -> int:
    scn = _scenario(args)
    values = [_size(v) if args.axis == "block_size" else v for v in args.values.split(",") if v]
    if args.axis in ("concurrency", "functions_per_vm"):
        values = [int(v) for v in values]
    if args.axis == "policy":
        bad = [v for v in values if v not in POLICIES]
        if bad:
            raise ScenarioError(f"unknown policies {bad}")
        policies = None
    else:
        policies = args.policies.split(",") if args.policies else None
        for p in policies or []:
            if p not in POLICIES:
                raise ScenarioError(f"unknown policy {p}")
    rows = sweep(scn, args.axis, values, policies, jobs=args.jobs)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8", newline="")
    (out / "run_manifest.json").write_text(
        run_manifest(scn, {"axis": args.axis, "values": values, "policies": policies or [scn.policy]}),
        encoding="utf-8")
    _say(args, f"{len(rows)} rows -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_replay(args) -> int:
    scn = _scenario(args)
    if args.trace and args.trace != "-":
        events = workload.parse_trace(Path(args.trace))
        onsets = workload.detect_onsets(events)
        res = replay(scn, events, onsets)
    else:
        res = replay(scn)
    out = _out(args)
    write_outputs(out, res)
    (out / "timeline.csv").write_text(timeline_csv(res), encoding="utf-8", newline="")
    rec = ", ".join(f"{r:.0f}" for r in res.recovery_s) or "n/a"
    _say(args, f"{scn.policy}: {len(res.sessions)} cold starts in {res.scale_outs} scale-outs, "
               f"max FT height {res.max_height}, recovery [s]: {rec}")
    return EXIT_OK


# ---------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="RNG seed (default 42, or the scenario's seed)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default ./out)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="functree", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--quiet", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", parents=[common], help="convert a raw image to the block format")
    c.add_argument("input")
    c.add_argument("--block-size", type=_size, default=blockstore.DEFAULT_BLOCK_SIZE)
    c.add_argument("--codec", choices=sorted(blockstore.CODEC_NAMES), default="zlib")
    c.add_argument("--out-prefix", "-o", default=None)
    c.add_argument("--image-id", default="")
    c.add_argument("--startup-fraction", type=float, default=None)
    c.add_argument("--startup-ranges", default="", help="offset:length,offset:length")
    c.set_defaults(fn=cmd_convert)

    v = sub.add_parser("verify", parents=[common], help="check a block file against its digest")
    v.add_argument("file")
    v.add_argument("--manifest", default=None)
    v.set_defaults(fn=cmd_verify)

    s = sub.add_parser("simulate", parents=[common], help="run one provisioning burst")
    s.add_argument("scenario")
    s.add_argument("--policy", choices=POLICIES, default=None)
    s.set_defaults(fn=cmd_simulate)

    w = sub.add_parser("sweep", parents=[common], help="sweep one scenario axis")
    w.add_argument("scenario")
    w.add_argument("--axis", choices=AXES, required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--policies", default="", help="comma-separated policies (default: scenario's)")
    w.add_argument("--jobs", type=int, default=1)
    w.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("replay", parents=[common], help="replay an invocation trace")
    r.add_argument("trace", help="trace CSV, or '-' for the scenario's synthetic bursts")
    r.add_argument("scenario")
    r.add_argument("--policy", choices=POLICIES, default=None)
    r.set_defaults(fn=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (BlockStoreError, workload.TraceError, WireError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SimError, SimulationFailed, PhaseError) as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
