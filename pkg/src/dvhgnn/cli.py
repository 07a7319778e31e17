"""``dvhgnn`` command-line tool.

Subcommands: forward, hyperedges, dump-hypergraph, gradcheck, bench, params.
Diagnostics (parameter counts, timings) go to stderr; results go to stdout or
to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import Pyramid, build_model, count_params_flops, load_weights, param_group
from .config import ModelConfig, load_config
from .functional import linear
from .gradcheck import REL_FLOOR, finite_diff_grad, relative_error
from .hypergraph import (
    MultiScaleHypergraph,
    PatchField,
    build_multiscale_hypergraph,
    construction_cost,
    dump_hypergraph,
)
from .ppm import PpmError, PpmImage, read_ppm, write_ppm
from .tensor import Tensor, corrupt_backward, no_grad

# Fixed palettes keep visualisations byte-identical across runs.
CLUSTER_PALETTE = [
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (170, 110, 40),
]
DILATED_PALETTE = [(255, 0, 0), (0, 200, 0), (0, 0, 255), (255, 200, 0), (200, 0, 255)]

GRADCHECK_TOL = 1e-4


# ------------------------------------------------------------------ helpers
def prepare_image(img: PpmImage, multiple: int = 32) -> np.ndarray:
    """Scale to [0, 1] and centre-crop/zero-pad each side to the nearest multiple."""
    x = img.pixels.astype(np.float64) / 255.0
    for axis in (0, 1):
        n = x.shape[axis]
        target = max(multiple, int(round(n / multiple)) * multiple)
        if target < n:
            start = (n - target) // 2
            x = np.take(x, np.arange(start, start + target), axis=axis)
        elif target > n:
            before = (target - n) // 2
            widths = [(0, 0)] * 3
            widths[axis] = (before, target - n - before)
            x = np.pad(x, widths)
    return x


def _load_model(args) -> Pyramid:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    model = build_model(cfg)
    if getattr(args, "weights", None):
        load_weights(model, args.weights)
    return model


def _stage_graph(model: Pyramid, image: np.ndarray, stage: int, head: int) -> MultiScaleHypergraph:
    """Hypergraph of ``head`` in the first block of ``stage`` (1-based)."""
    cfg = model.cfg
    if not 1 <= stage <= 4:
        raise ValueError(f"stage must be 1..4, got {stage}")
    if not 0 <= head < cfg.heads[stage - 1]:
        raise ValueError(f"head must be 0..{cfg.heads[stage - 1] - 1} for stage {stage}, got {head}")
    if cfg.blocks[stage - 1] == 0:
        raise ValueError(f"stage {stage} has no blocks, hence no hypergraph")
    with no_grad():
        x = model.stem_forward(Tensor(image))
        for s in range(stage - 1):
            x = model.stage_forward(s, x)
        x = model.stage_input(stage - 1, x)
        block = model.stages[stage - 1][0]
        p = block.dhconv.heads[head]
        xs = linear(block.norm1(x), p.sim_weight, p.sim_bias)
        return build_multiscale_hypergraph(PatchField(xs, stage=stage), cfg, head=head)


def render_maps(hg: MultiScaleHypergraph, image: np.ndarray, patch: int):
    """Cluster and dilated overlays, ``patch`` pixels per vertex."""
    h, w = hg.height, hg.width
    base = np.zeros((h * patch, w * patch, 3), dtype=np.uint8)
    src = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    ph, pw = min(src.shape[0], base.shape[0]), min(src.shape[1], base.shape[1])
    base[:ph, :pw] = src[:ph, :pw]

    half = base // 2

    def paint(target, edge, palette, index):
        color = np.array(palette[index % len(palette)], dtype=np.uint8) // 2
        for v in edge.members:
            r, c = divmod(v, w)
            sl = (slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch))
            target[sl] = half[sl] + color

    cluster = base.copy()
    for e in hg.cluster_edges():
        paint(cluster, e, CLUSTER_PALETTE, e.param)
    dilated = base // 3
    # largest rate first so the innermost pattern stays visible
    for e in sorted(hg.dilated_edges(), key=lambda e: -e.param):
        paint(dilated, e, DILATED_PALETTE, e.param - 1)
    return cluster, dilated


def _write_manifest(out: Path, args, extra: Optional[Dict] = None) -> None:
    manifest = {
        "subcommand": args.command,
        "config": str(args.config),
        "seed": getattr(args, "seed", None),
        "input": str(getattr(args, "image", "")),
        "output_dir": str(out),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -------------------------------------------------------------- subcommands
def cmd_forward(args) -> int:
    model = _load_model(args)
    image = prepare_image(read_ppm(args.image))
    params, _ = count_params_flops(model, image.shape[:2])
    print(f"# {model.cfg.name}: {params / 1e6:.2f}M parameters", file=sys.stderr)
    t0 = time.perf_counter()
    with no_grad():
        logits = model(Tensor(image)).data
    print(f"# forward {1000 * (time.perf_counter() - t0):.1f} ms", file=sys.stderr)
    k = min(args.topk, logits.size)
    order = np.lexsort((np.arange(logits.size), -logits))[:k]
    for rank, cls in enumerate(order, 1):
        print(f"{rank} {int(cls)} {logits[cls]:.10f}")
    return 0


def cmd_hyperedges(args) -> int:
    model = _load_model(args)
    image = prepare_image(read_ppm(args.image))
    hg = _stage_graph(model, image, args.stage, args.head)
    patch = image.shape[0] // hg.height
    cluster, dilated = render_maps(hg, image, patch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"s{args.stage}_h{args.head}"
    write_ppm(out / f"cluster_{tag}.ppm", cluster)
    write_ppm(out / f"dilated_{tag}.ppm", dilated)
    (out / f"hypergraph_{tag}.txt").write_text(dump_hypergraph(hg))
    _write_manifest(out, args, {"stage": args.stage, "head": args.head, "patch_pixels": patch})
    print(f"wrote cluster_{tag}.ppm, dilated_{tag}.ppm, hypergraph_{tag}.txt to {out}")
    return 0


def cmd_dump_hypergraph(args) -> int:
    model = _load_model(args)
    image = prepare_image(read_ppm(args.image))
    text = dump_hypergraph(_stage_graph(model, image, args.stage, args.head))
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return 0


def run_gradcheck(
    cfg: ModelConfig,
    samples: int,
    seed: int = 0,
    h: float = 1e-5,
    image_size: int = 28,
    fault: Optional[str] = None,
) -> Dict[str, Dict[str, float]]:
    """Backward vs central differences on ``samples`` parameter coordinates.

    Coordinates are spread round-robin over parameter groups so every group
    is exercised.  Returns per-group count / max / mean relative error.
    """
    model = build_model(cfg)
    rng = np.random.default_rng(seed)
    image = Tensor(rng.random((image_size, image_size, 3)))
    probe = Tensor(rng.standard_normal(cfg.num_classes))

    def loss():
        return (model(image) * probe).sum()

    model.zero_grad()
    if fault:
        with corrupt_backward(fault):
            loss().backward()
    else:
        loss().backward()

    named = list(model.named_parameters())
    groups: Dict[str, List] = {}
    for name, t in named:
        groups.setdefault(param_group(name), []).append((name, t))
    order = sorted(groups)
    picks: Dict[str, List] = {g: [] for g in order}
    for i in range(samples):
        g = order[i % len(order)]
        members = groups[g]
        sizes = np.array([t.size for _, t in members], dtype=float)
        j = rng.choice(len(members), p=sizes / sizes.sum())
        name, t = members[j]
        idx = np.unravel_index(int(rng.integers(t.size)), t.shape)
        picks[g].append((t, idx))

    report = {}
    for g in order:
        errs = []
        for t, idx in picks[g]:
            num = finite_diff_grad(lambda _: loss(), t, h, [idx])[idx]
            ana = 0.0 if t.grad is None else t.grad[idx]
            errs.append(float(relative_error(ana, num)))
        if errs:
            report[g] = {"n": len(errs), "max": max(errs), "mean": float(np.mean(errs))}
    return report


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config).replace(seed=args.seed)
    report = run_gradcheck(cfg, args.samples, seed=args.seed, h=args.step, fault=args.inject_fault)
    worst = 0.0
    failed = []
    print(f"{'group':<18} {'n':>3} {'max_rel':>10} {'mean_rel':>10}")
    for g, r in report.items():
        status = "ok" if r["max"] < GRADCHECK_TOL else "FAIL"
        if status == "FAIL":
            failed.append(g)
        worst = max(worst, r["max"])
        print(f"{g:<18} {r['n']:>3} {r['max']:>10.3e} {r['mean']:>10.3e} {status}")
    if failed:
        print(f"FAIL max rel err {worst:.3e} >= {GRADCHECK_TOL:g} in: {', '.join(failed)}")
        return 1
    print(f"PASS max rel err {worst:.3e} < {GRADCHECK_TOL:g} (floor {REL_FLOOR:g})")
    return 0


def cmd_bench(args) -> int:
    methods = ["cluster_dhgc", "knn"] if args.method == "all" else [args.method]
    print("method,N,ops,ms")
    results = {}
    for method in methods:
        recs = construction_cost(args.sizes, method, dim=args.dim, repeats=args.repeats, seed=args.seed)
        results[method] = recs
        for r in recs:
            print(f"{r.method},{r.n},{r.ops},{r.ms:.3f}")
    for method, recs in results.items():
        print(f"# {method} slope ops={recs[0].slope:.4f} wall={recs[0].wall_slope:.4f}")
    return 0


def cmd_params(args) -> int:
    model = _load_model(args)
    params, macs = count_params_flops(model, args.size)
    print(f"{model.cfg.name} params={params} ({params / 1e6:.2f}M) mult_adds={macs} ({macs / 1e9:.3f}G) @ {args.size}x{args.size}")
    return 0


# ------------------------------------------------------------------ parsing
def _sizes(text: str) -> List[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers: {text!r}") from None
    if len(sizes) < 4:
        raise argparse.ArgumentTypeError("need at least 4 sizes")
    return sizes


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dvhgnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def model_args(p, image=True):
        p.add_argument("--config", default="T", help="preset (T, S, M, B, toy) or JSON config path")
        p.add_argument("--weights", help="weights manifest; omitted = seeded random init")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if image:
            p.add_argument("--image", required=True, help="binary P6 PPM")

    p = sub.add_parser("forward", help="classify one image, print top-k")
    model_args(p)
    p.add_argument("--topk", type=_positive, default=5)
    p.set_defaults(func=cmd_forward)

    for name, func, helptext in (
        ("hyperedges", cmd_hyperedges, "write cluster / dilated hyperedge overlays"),
        ("dump-hypergraph", cmd_dump_hypergraph, "write the hypergraph text dump"),
    ):
        p = sub.add_parser(name, help=helptext)
        model_args(p)
        p.add_argument("--stage", type=int, default=1, help="1..4")
        p.add_argument("--head", type=int, default=0)
        p.add_argument("--out", required=name == "hyperedges", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="backward vs finite differences")
    p.add_argument("--config", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=_positive, default=50)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--inject-fault", default=None, metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="hypergraph vs KNN construction cost")
    p.add_argument("--method", choices=["knn", "cluster_dhgc", "all"], default="all")
    p.add_argument("--sizes", type=_sizes, default=[196, 784, 3136, 12544])
    p.add_argument("--dim", type=_positive, default=24)
    p.add_argument("--repeats", type=_positive, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="parameter count and mult-adds")
    model_args(p, image=False)
    p.add_argument("--size", type=_positive, default=224)
    p.set_defaults(func=cmd_params)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (PpmError, ValueError, FileNotFoundError) as err:
        print(f"dvhgnn {args.command}: error: {err}", file=sys.stderr)
        return 2
    print(f"# {args.command} took {time.perf_counter() - t0:.2f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
