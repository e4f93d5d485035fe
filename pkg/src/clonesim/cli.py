"""Command-line entry point: ``clonesim <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .cache import CacheGeometry, load_geometry
from .detector import CloneBuster, DetectorConfig, estimate_clone_count, write_verdicts
from .eviction import build_monitoring_set, default_region_bytes, select_channel, true_targets
from .experiment import ExperimentSpec, manifest, noise_workload, run_experiment, workload_name
from .linearity import (FULL_LAYOUT, SCALED_LAYOUT, check_conditions, evasion_demo,
                        search_nonlinear)
from .osmodel import (PAGE_SIZE, AdversaryScript, Linear, Permuted, World, allocate,
                      apply_adversary)
from .scenarios import SCENARIOS, make_platform
from .timing import LatencyModel

CONFIG_KEYS = {"geometry", "detector", "latency", "workload", "seeds"}


def load_config(path):
    """Run config: JSON object with optional geometry/detector/latency/workload/seeds keys."""
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _geometry(args, cfg) -> CacheGeometry:
    if getattr(args, "geometry", None):
        return load_geometry(args.geometry)
    if "geometry" in cfg:
        return load_geometry(cfg["geometry"])
    return CacheGeometry(slices=getattr(args, "slices", 1))


def _dump(obj, path):
    text = json.dumps(obj, indent=2, default=str)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_build_eviction(args) -> int:
    cfg = load_config(args.config)
    geo = _geometry(args, cfg)
    world = World(geo, seed=args.seed)
    n_pages = (args.region_mib << 20) // PAGE_SIZE if args.region_mib else None
    pages = n_pages or default_region_bytes(geo) // PAGE_SIZE
    policy = Linear(64) if args.mapping == "linear" else Permuted(seed=args.seed, base=64)
    world.add_actor("enclave", allocate(policy, pages))
    channel = args.channel if args.channel is not None else select_channel(args.identity)
    ms = build_monitoring_set(world, "enclave", channel,
                              region_bytes=pages * PAGE_SIZE,
                              check_coverage=args.mapping == "linear")
    targets = true_targets(world, "enclave", ms)
    print(f"channel {channel}: {len(ms.sets)} eviction sets of {geo.ways} lines, "
          f"{len(set(targets))} distinct (set, slice) targets")
    if args.out:
        ms.save(args.out)
    return 0


def _frames_arg(text):
    return tuple(int(x) for x in text.split(","))


def cmd_verify_linearity(args) -> int:
    layout = SCALED_LAYOUT if args.layout == "scaled" else FULL_LAYOUT
    if args.frames:
        frames = _frames_arg(args.frames)
    else:
        frames = tuple(range(args.pages or layout.n_frames))
    report = check_conditions(frames, layout, endpoint_conflict=args.endpoint)
    print(report.summary())
    for c in report.failed():
        print(f"  condition {c} counterexample {report.results[c].counterexample}")
    return 0 if report.passed else 1


def cmd_search_nonlinear(args) -> int:
    if args.evasion is not None:
        res = evasion_demo(args.evasion)
        out = {"k": res.k, "scaled_k": res.scaled_k, "evaded": res.evaded, "nodes": res.nodes,
               "mapping_a": res.mapping_a, "mapping_b": res.mapping_b,
               "sets_a": res.sets_a, "sets_b": res.sets_b}
        _dump(out, args.out)
        return 0
    sols = search_nonlinear(SCALED_LAYOUT, limit=args.limit, affinity=args.affine)
    _dump({"layout": SCALED_LAYOUT.name, "count": len(sols), "mappings": sols}, args.out)
    return 0 if sols else 1


def cmd_detect(args) -> int:
    cfg = load_config(args.config)
    geo = _geometry(args, cfg)
    det = cfg.get("detector", {})
    m, w, t, N = det.get("m", args.m), det.get("w", args.w), det.get("t", args.t), det.get("N", args.n)
    seeds = cfg.get("seeds", [args.seed])
    latency = LatencyModel(**cfg["latency"]) if "latency" in cfg else None
    script = AdversaryScript.load(args.script) if args.script else None
    rows = []
    for seed in seeds:
        actors = [f"V{i}" for i in range(N + args.clones)]
        plat = make_platform(actors, geo, seed,
                             world_kwargs={"latency": latency} if latency else None)
        world = plat.world
        if script is not None:
            world = apply_adversary(world, script,
                                    {"V0": true_targets(world, "V0", plat.monitoring["V0"])})
        conf = DetectorConfig(m=m, w=w, t=t, N=N, W=geo.ways)
        insts = [CloneBuster(world, a, plat.monitoring[a], conf) for a in actors]
        for inst in insts:
            inst.start()
        noise = noise_workload(cfg.get("workload", "idle"), seed).bind(geo, plat.channel)
        per_pass = len(plat.monitoring["V0"].sets) * m
        for _ in range(args.passes):
            noise.run(world, per_pass)
            for inst in insts:
                inst.probe()
        for v in insts[0].verdicts:
            rows.append({"seed": seed, "m": m, "w": w, "t": t, "N": N,
                         "workload": workload_name(cfg.get("workload", "idle")),
                         "misses": "", "verdict": str(v),
                         "truth": "clone" if args.clones else "benign"})
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_verdicts(fh, rows)
    else:
        write_verdicts(sys.stdout, rows)
    return 0


def cmd_attack(args) -> int:
    run = SCENARIOS[args.scenario]
    out = run(args.with_detector, clones=args.clones, seed=args.seed)
    _dump(out.to_dict(), args.out)
    return 0


def cmd_sweep(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    os.makedirs(args.out_dir, exist_ok=True)
    verdicts = [] if args.verdicts else None
    table = run_experiment(spec, verdicts)
    metrics = os.path.join(args.out_dir, "metrics.csv")
    with open(metrics, "w", newline="") as fh:
        table.write_csv(fh)
    outputs = [metrics]
    if verdicts is not None:
        path = os.path.join(args.out_dir, "verdicts.csv")
        with open(path, "w", newline="") as fh:
            write_verdicts(fh, verdicts)
        outputs.append(path)
    _dump(manifest(spec, outputs), os.path.join(args.out_dir, "manifest.json"))
    print(f"{len(table)} rows -> {metrics}")
    return 0


def cmd_estimate_clones(args) -> int:
    geo = _geometry(args, {})
    actors = [f"V{i}" for i in range(1 + args.others)]
    plat = make_platform(actors, geo, args.seed)
    insts = [CloneBuster(plat.world, a, plat.monitoring[a],
                         DetectorConfig(m=12, w=192, t=1, N=1, W=geo.ways)) for a in actors]
    for inst in insts:
        inst.calibrate()
    est, log = estimate_clone_count(insts, W=geo.ways)
    for N, m, missed in log:
        print(f"N={N} m={m} {'contention' if missed else 'quiet'}")
    print(f"other instances: {est}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clonesim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-eviction", help="build a channel monitoring set")
    b.add_argument("--config")
    b.add_argument("--geometry", help="geometry JSON file")
    b.add_argument("--slices", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--mapping", choices=("linear", "permuted"), default="linear")
    b.add_argument("--channel", type=int)
    b.add_argument("--identity", default="toy-enclave")
    b.add_argument("--region-mib", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_build_eviction)

    v = sub.add_parser("verify-linearity", help="check a page table against the linearity conditions")
    v.add_argument("--layout", choices=("scaled", "full"), default="scaled")
    v.add_argument("--frames", help="comma-separated frame numbers, page 0 first")
    v.add_argument("--pages", type=int, help="contiguous identity mapping of this many pages")
    v.add_argument("--endpoint", action="store_true", help="also require first/last row conflict")
    v.set_defaults(func=cmd_verify_linearity)

    s = sub.add_parser("search-nonlinear", help="find non-contiguous layouts passing every check")
    s.add_argument("--limit", type=int, default=8)
    s.add_argument("--affine", action="store_true", help="also require frame[v] = frame[0] + v")
    s.add_argument("--evasion", type=int, metavar="K",
                   help="instead look for two layouts monitoring disjoint sets of K")
    s.add_argument("--out")
    s.set_defaults(func=cmd_search_nonlinear)

    d = sub.add_parser("detect", help="run detectors and write per-window verdicts")
    d.add_argument("--config")
    d.add_argument("--geometry")
    d.add_argument("--slices", type=int, default=1)
    d.add_argument("--m", type=int, default=12)
    d.add_argument("--w", type=int, default=64)
    d.add_argument("--t", type=int, default=1)
    d.add_argument("--n", type=int, default=1, help="allowed concurrent instances")
    d.add_argument("--clones", type=int, default=0, help="extra instances beyond N")
    d.add_argument("--passes", type=int, default=8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--script", help="adversary script JSON")
    d.add_argument("--out")
    d.set_defaults(func=cmd_detect)

    a = sub.add_parser("attack", help="run a forking-attack scenario")
    a.add_argument("scenario", choices=sorted(SCENARIOS))
    a.add_argument("--with-detector", action="store_true")
    a.add_argument("--clones", type=int, default=2)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    w = sub.add_parser("sweep", help="parameter sweep from a JSON spec")
    w.add_argument("--spec", required=True)
    w.add_argument("--out-dir", default="sweep-out")
    w.add_argument("--verdicts", action="store_true", help="also write per-window verdicts")
    w.set_defaults(func=cmd_sweep)

    e = sub.add_parser("estimate-clones", help="count co-resident instances with the m ladder")
    e.add_argument("--others", type=int, default=0, help="ground-truth other instances to simulate")
    e.add_argument("--geometry")
    e.add_argument("--slices", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_estimate_clones)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
