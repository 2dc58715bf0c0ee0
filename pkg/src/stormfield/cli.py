"""``stormfield`` command line: simulate, render, eval, presets, kernels.

Exit codes: 0 success, 2 validation failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .dynamics import Toggles, simulate
from .errors import StormfieldError, UnknownStyleError, ValidationError
from .field import WeatherFieldConfig, preset, preset_table
from .kernels import (AdapterStack, AttentionBatch, adapter_forward, adapter_register_style,
                      attention_weights, scaled_dot_attention, self_attn, temporal_attn,
                      tv_attn, view_attn)
from .metrics import bhattacharyya_distance, clip_ds, clip_s, histogram_of, warp_error
from .splatter import configure_threads, project, rasterize

log = logging.getLogger("stormfield")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3
TRAJECTORY_NAME = "trajectory.stf"
DEFAULT_LAMBDA = 0.5


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _add_weather_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="weather config JSON (overrides --weather/--severity)")
    p.add_argument("--weather", choices=["snow", "rain", "fog"], default="snow")
    p.add_argument("--severity", default="moderate", help="light|moderate|heavy or a positive multiplier")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--dt", type=float, help="simulation step in seconds (default: manifest frame interval)")
    p.add_argument("--no-alignment", action="store_true", help="keep the field fixed in the world")
    p.add_argument("--no-dynamics", action="store_true", help="freeze particle motion")
    p.add_argument("--no-attributes", action="store_true", help="random particle attributes")


def _weather_config(args) -> WeatherFieldConfig:
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config}: invalid JSON ({exc})") from exc
        return WeatherFieldConfig.from_dict(doc)
    return preset(args.weather, args.severity)


def _toggles(args) -> Toggles:
    return Toggles(attributes=not args.no_attributes, dynamics=not args.no_dynamics,
                   alignment=not args.no_alignment)


def _simulate_bytes(args, manifest: sio.SceneManifest) -> bytes:
    config = _weather_config(args)
    toggles = _toggles(args)
    dt = manifest.frame_interval if args.dt is None else args.dt
    sets = simulate(config, manifest.center_trajectory(), dt, args.seed, toggles)
    header = {
        "config": config.to_dict(),
        "seed": args.seed,
        "toggles": toggles.to_dict(),
        "dt": dt,
        "center_view": manifest.center_view,
    }
    return sio.encode_trajectory(header, list(zip(manifest.frame_indices, sets)))


def cmd_simulate(args) -> int:
    manifest = sio.load_manifest(args.manifest)
    data = _simulate_bytes(args, manifest)
    out = Path(args.out)
    with sio.StagedOutput(out) as stage:
        stage.write_bytes(TRAJECTORY_NAME, data)
    log.info("wrote %s (%d frames)", out / TRAJECTORY_NAME, len(manifest.frame_indices))
    return EXIT_OK


def frame_name(frame_index: int, view_id: int) -> str:
    return f"f{frame_index:04d}_v{view_id}.png"


def cmd_render(args) -> int:
    configure_threads()
    manifest = sio.load_manifest(args.manifest)
    if args.trajectory is not None:
        _, records = sio.read_trajectory(args.trajectory)
    else:
        # round-trip through the file encoding so inline and two-step renders agree
        _, records = sio.decode_trajectory(_simulate_bytes(args, manifest))
    indices = manifest.frame_indices
    if [i for i, _ in records] != indices:
        raise ValidationError(
            f"trajectory has {len(records)} frames {[i for i, _ in records][:5]}..., "
            f"manifest has {len(indices)} frames {indices[:5]}..."
        )
    with sio.StagedOutput(Path(args.out)) as stage:
        for frame_index, particles in records:
            for entry in manifest.entries_at(frame_index):
                cam = entry.camera
                bg = sio.read_png(entry.background_path)
                if bg.shape[:2] != (cam.height, cam.width):
                    raise ValidationError(
                        f"{entry.background_path}: image is {bg.shape[1]}x{bg.shape[0]}, "
                        f"intrinsics say {cam.width}x{cam.height}"
                    )
                img = rasterize(project(particles, cam), bg)
                name = frame_name(frame_index, cam.view_id)
                if np.array_equal(sio.to_uint8(img), sio.to_uint8(bg)) and sio.is_rgb8_png(entry.background_path):
                    # nothing visible changed; pass the background through untouched
                    stage.copy_from(name, entry.background_path)
                else:
                    stage.write_bytes(name, sio.png_bytes(img))
    return EXIT_OK


def cmd_presets(args) -> int:
    table = preset_table()
    if args.json:
        json.dump(table, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return EXIT_OK
    print(f"{'weather':8} {'severity':9} {'quantity':>8} {'velocity (m/s)':>22} "
          f"{'scale mean (m)':>24} {'opacity':>12} {'color mean':>20}")
    for row in table:
        c = row["config"]
        d = c["dists"]
        vel = " ".join(f"{v:g}" for v in c["velocity"]["direction"])
        scale = " ".join(f"{g['mean']:g}" for g in d["scale"])
        color = " ".join(f"{g['mean']:g}" for g in d["color"])
        op = f"{d['opacity']['mean']:g}±{d['opacity']['stddev']:g}"
        print(f"{row['weather']:8} {row['severity']:9} {c['quantity']:>8} {vel:>22} "
              f"{scale:>24} {op:>12} {color:>20}")
    return EXIT_OK


class _Report:
    def __init__(self):
        self.lines: list[str] = []
        self.values: dict[str, list[float]] = {}
        self.failed = 0
        self.exit = EXIT_OK

    def run(self, metric, inputs, fn):
        try:
            value = fn()
        except (StormfieldError, OSError) as exc:
            self.fail(metric, inputs, exc)
            return
        self.values.setdefault(metric, []).append(value)
        self.lines.append(sio.metric_record(metric, value, inputs))

    def fail(self, metric, inputs, exc):
        self.failed += 1
        self.exit = max(self.exit, EXIT_IO if isinstance(exc, OSError) else EXIT_VALIDATION)
        print(f"stormfield eval: {metric} {inputs}: {exc}", file=sys.stderr)
        self.lines.append(json.dumps({"metric": metric, "value": None, "inputs": inputs,
                                      "error": str(exc)}, sort_keys=True))

    def finish(self):
        for metric, vals in self.values.items():
            self.lines.append(sio.metric_record(f"{metric}/mean", float(np.mean(vals)), {"count": len(vals)}))
        return "\n".join(self.lines) + ("\n" if self.lines else "")


def _embedding_rows(paths):
    mats = [sio.read_embeddings(p) for p in paths]
    n = max(len(m) for m in mats)
    for p, m in zip(paths, mats):
        if len(m) not in (1, n):
            raise ValidationError(f"{p}: has {len(m)} vectors, expected 1 or {n}")
    return n, [m if len(m) == n else np.repeat(m, n, axis=0) for m in mats]


def cmd_eval(args) -> int:
    report = _Report()
    for t, t1, flow in args.warp or []:
        report.run("warp_error", [t, t1, flow],
                   lambda: warp_error(sio.read_png(t), sio.read_png(t1), sio.read_flow(flow)))
    for a, b in args.bhattacharyya or []:
        report.run("bhattacharyya", [a, b], lambda: bhattacharyya_distance(
            histogram_of(sio.read_png(a), args.bins, args.crop),
            histogram_of(sio.read_png(b), args.bins, args.crop)))
    for a, b in args.clip_s or []:
        try:
            n, (ea, eb) = _embedding_rows([a, b])
        except (StormfieldError, OSError) as exc:
            report.fail("clip_s", [a, b], exc)
            continue
        for i in range(n):
            report.run("clip_s", [a, b, i], lambda i=i: clip_s(ea[i], eb[i]))
    for paths in args.clip_ds or []:
        try:
            n, mats = _embedding_rows(paths)
        except (StormfieldError, OSError) as exc:
            report.fail("clip_ds", list(paths), exc)
            continue
        for i in range(n):
            report.run("clip_ds", [*paths, i], lambda i=i: clip_ds(*(m[i] for m in mats)))
    if not report.lines:
        raise ValidationError("eval needs at least one of --warp, --bhattacharyya, --clip-s, --clip-ds")
    text = report.finish()
    if args.out:
        sio.atomic_write_bytes(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return report.exit


def _emit_matrix(args, m) -> int:
    if args.out:
        sio.write_matrix(args.out, m)
    else:
        sys.stdout.write(sio.format_matrix(m))
    return EXIT_OK


def _batch(args) -> AttentionBatch:
    grids = {}
    for frame, view, path in args.grid:
        grids[(int(frame), int(view))] = sio.read_matrix(path)
    proj = {k: sio.read_matrix(getattr(args, k)) if getattr(args, k) else None for k in ("wq", "wk", "wv")}
    return AttentionBatch(grids, center_view=args.center_view, lam=args.lam, **proj)


def cmd_kernels(args) -> int:
    op = args.kernel
    if op in ("sdpa", "weights"):
        Q, K = sio.read_matrix(args.q), sio.read_matrix(args.k)
        if op == "weights":
            return _emit_matrix(args, attention_weights(Q, K))
        return _emit_matrix(args, scaled_dot_attention(Q, K, sio.read_matrix(args.v)))
    if op in ("self", "view", "temporal", "tv"):
        fn = {"self": self_attn, "view": view_attn, "temporal": temporal_attn, "tv": tv_attn}[op]
        return _emit_matrix(args, fn(_batch(args), args.frame, args.view))
    if op == "adapter":
        stack = AdapterStack(sio.read_matrix(args.base))
        for style, a, b in args.style or []:
            stack = adapter_register_style(stack, style, sio.read_matrix(a), sio.read_matrix(b))
        x = sio.read_matrix(args.x)
        return _emit_matrix(args, adapter_forward(stack, args.use, x))
    raise ValidationError(f"unknown kernel {op!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stormfield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the weather field along the center-view trajectory")
    p.add_argument("--manifest", type=Path, required=True)
    _add_weather_args(p)
    p.add_argument("--out", type=Path, required=True, help=f"output directory (writes {TRAJECTORY_NAME})")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("render", help="composite particles over every background frame")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--trajectory", type=Path, help="trajectory file; simulated inline when omitted")
    _add_weather_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="consistency metrics as JSON lines")
    p.add_argument("--warp", nargs=3, action="append", metavar=("FRAME_T", "FRAME_T1", "FLOW"))
    p.add_argument("--bhattacharyya", nargs=2, action="append", metavar=("IMG_A", "IMG_B"))
    p.add_argument("--clip-s", nargs=2, action="append", metavar=("EMB_A", "EMB_B"))
    p.add_argument("--clip-ds", nargs=4, action="append",
                   metavar=("IMG_SRC", "IMG_EDIT", "TXT_SRC", "TXT_TARGET"))
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--crop", type=int, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--out", type=Path, help="report file (default: stdout)")
    p.add_argument("--json", action="store_true", help="accepted for symmetry; output is always JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("presets", help="list the built-in weather presets")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_presets)

    p = sub.add_parser("kernels", help="attention and adapter kernels on text matrices")
    ks = p.add_subparsers(dest="kernel", required=True)
    for name in ("sdpa", "weights"):
        k = ks.add_parser(name)
        k.add_argument("--q", type=Path, required=True)
        k.add_argument("--k", type=Path, required=True)
        if name == "sdpa":
            k.add_argument("--v", type=Path, required=True)
        k.add_argument("--out", type=Path)
    for name in ("self", "view", "temporal", "tv"):
        k = ks.add_parser(name)
        k.add_argument("--grid", nargs=3, action="append", required=True, metavar=("FRAME", "VIEW", "PATH"))
        k.add_argument("--center-view", type=int, required=True)
        k.add_argument("--frame", type=int, required=True)
        k.add_argument("--view", type=int, required=True)
        k.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
        for w in ("wq", "wk", "wv"):
            k.add_argument(f"--{w}", type=Path)
        k.add_argument("--out", type=Path)
    k = ks.add_parser("adapter")
    k.add_argument("--base", type=Path, required=True)
    k.add_argument("--style", nargs=3, action="append", metavar=("ID", "A", "B"))
    k.add_argument("--use", required=True, help="style id for the forward pass")
    k.add_argument("--x", type=Path, required=True, help="inputs, one sample per row")
    k.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_kernels)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, UnknownStyleError) as exc:
        print(f"stormfield {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"stormfield {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
