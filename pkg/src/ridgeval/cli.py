"""Batch command line: density, curvature, detect, lines, enhance, synth.

Exit codes: 0 success, 1 usage, 2 input data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Union

import numpy as np

from . import synth
from .cloud import PointCloud, estimate_normals
from .curvature import curvature_field
from .enhance import MODES, enhance
from .errors import InputError, NumericalError, RidgevalError
from .io import heatmap_colors, read_cloud, write_cloud, write_polylines
from .ridge_detect import detect_features
from .ridge_lines import extract_polylines

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    radius_mult: float = 3.0
    noise_radius_mult: float = 6.0
    mode: str = "conformal"
    delta: Union[float, str] = "auto"
    lam: float = 0.5
    k: int = 12
    seed: int = 0
    adaptive: Optional[bool] = None
    noise: bool = False

    # JSON keys that differ from attribute names
    ALIASES = {"lambda": "lam"}

    def validate(self) -> "PipelineConfig":
        def bad(name, why):
            raise InputError("config field %s: %s" % (name, why))

        if not isinstance(self.radius_mult, (int, float)) or self.radius_mult < 1:
            bad("radius_mult", "must be a number >= 1")
        if not isinstance(self.noise_radius_mult, (int, float)) or self.noise_radius_mult <= 0:
            bad("noise_radius_mult", "must be a positive number")
        if self.mode not in MODES:
            bad("mode", "must be one of %s" % ", ".join(MODES))
        if isinstance(self.delta, str):
            if self.delta != "auto":
                try:
                    self.delta = float(self.delta)
                except ValueError:
                    bad("delta", "must be a number or 'auto'")
        if not isinstance(self.delta, str) and (not np.isfinite(self.delta) or self.delta < 0):
            bad("delta", "must be >= 0")
        if not isinstance(self.lam, (int, float)) or not 0.0 <= self.lam <= 1.0:
            bad("lambda", "must lie in [0, 1]")
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 4:
            bad("k", "must be an integer >= 4")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            bad("seed", "must be an integer")
        if self.adaptive is not None and not isinstance(self.adaptive, bool):
            bad("adaptive", "must be true or false")
        return self

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "PipelineConfig":
        """Defaults, then the JSON file, then ``overrides`` (entries that are None are ignored)."""
        values = {}
        if path:
            try:
                with open(path) as f:
                    data = json.load(f)
            except OSError as exc:
                raise InputError("%s: cannot read config (%s)" % (path, exc.strerror)) from exc
            except json.JSONDecodeError as exc:
                raise InputError("%s: invalid JSON at line %d" % (path, exc.lineno)) from exc
            if not isinstance(data, dict):
                raise InputError("%s: config must be a JSON object" % path)
            for key, value in data.items():
                name = cls.ALIASES.get(key, key)
                if name not in cls.names():
                    raise InputError("config field %s: unknown" % key)
                values[name] = value
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls(**values).validate()

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @property
    def analysis_mult(self) -> float:
        return self.noise_radius_mult if self.noise else self.radius_mult


@dataclass
class RunReport:
    command: str
    counts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def timed(self, stage: str):
        report = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                report.timings[stage] = time.perf_counter() - self.t

        return _Timer()

    def render(self) -> str:
        lines = ["command: %s" % self.command]
        lines += ["count.%s: %d" % (k, v) for k, v in self.counts.items()]
        lines += ["value.%s: %.10g" % (k, v) for k, v in self.values.items()]
        lines += ["time.%s: %.3fs" % (k, v) for k, v in self.timings.items()]
        lines += ["output: %s" % p for p in self.outputs]
        return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, "%s: error: %s\n" % (self.prog, message))


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError("expected true/false, got %r" % text)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with PipelineConfig fields; flags override it")
    p.add_argument("--radius-mult", dest="radius_mult", type=float)
    p.add_argument("--noise-radius-mult", dest="noise_radius_mult", type=float)
    p.add_argument("--noise", dest="noise", action="store_const", const=True,
                   help="noisy input: analysis radii from --noise-radius-mult")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--delta", help="amplitude in model units or 'auto'")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--adaptive", type=_bool, help="true/false; default auto-detected")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ridgeval", description="Ridge/valley detection and feature enhancement for point clouds")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("density", help="print the sampling density rho")
    p.add_argument("input")
    _add_config_flags(p)

    p = sub.add_parser("curvature", help="mean-curvature heatmap cloud")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("detect", help="EPD heatmap and feature cloud")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="feature point cloud")
    p.add_argument("--heatmap", help="EPD heatmap cloud (default: <out>_heatmap.ply)")
    _add_config_flags(p)

    p = sub.add_parser("lines", help="feature polylines as OBJ")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("enhance", help="enhanced (augmented) cloud")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic surface")
    p.add_argument("surface", choices=sorted(synth.GENERATORS))
    p.add_argument("--n", type=int, help="approximate point count")
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian noise in multiples of rho")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    return parser


def _config(args) -> PipelineConfig:
    over = {name: getattr(args, name, None) for name in PipelineConfig.names()}
    return PipelineConfig.load(args.config, over)


def _with_normals(cloud: PointCloud, cfg: PipelineConfig, report: RunReport) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    with report.timed("normals"):
        return cloud.with_normals(estimate_normals(cloud, cfg.analysis_mult * cloud.rho))


def _detect(cloud: PointCloud, cfg: PipelineConfig, report: RunReport):
    with report.timed("curvature"):
        field_ = curvature_field(cloud, cfg.analysis_mult * cloud.rho)
    epd = (1.5 * cfg.noise_radius_mult if cfg.noise else cfg.radius_mult) * cloud.rho
    with report.timed("detect"):
        feats = detect_features(cloud, epd, field_)
    report.counts["classified"] = int(feats.classified.sum())
    report.counts["features"] = len(feats)
    return field_, feats


def _curvature_colors(values: np.ndarray) -> np.ndarray:
    scale = float(np.percentile(np.abs(values), 99)) or 1.0
    t = np.clip(0.5 + 0.5 * values / scale, 0.0, 1.0)
    return np.rint(np.column_stack([255 * t, np.zeros_like(t), 255 * (1 - t)])).astype(np.uint8)


def run(args, report: RunReport) -> None:
    cfg = _config(args)
    if args.command == "synth":
        kw = {"sigma": args.sigma, "seed": cfg.seed}
        if args.n:
            kw["n"] = args.n
        with report.timed("synth"):
            cloud = synth.GENERATORS[args.surface](**kw)
        write_cloud(args.out, cloud)
        report.counts["points"] = len(cloud)
        report.outputs.append(args.out)
        return

    cloud = read_cloud(args.input)
    report.counts["input_points"] = len(cloud)
    rho = cloud.rho
    report.values["rho"] = rho
    if args.command == "density":
        return
    cloud = _with_normals(cloud, cfg, report)
    if args.command == "curvature":
        with report.timed("curvature"):
            field_ = curvature_field(cloud, cfg.analysis_mult * rho)
        write_cloud(args.out, cloud, _curvature_colors(field_.values))
        report.outputs.append(args.out)
        return
    if args.command == "detect":
        _, feats = _detect(cloud, cfg, report)
        heat = args.heatmap or os.path.splitext(args.out)[0] + "_heatmap.ply"
        write_cloud(heat, cloud, heatmap_colors(feats.epd_heatmap, rho))
        write_cloud(args.out, PointCloud(feats.positions) if len(feats) else PointCloud(np.zeros((0, 3))))
        report.outputs += [args.out, heat]
        return
    if args.command == "lines":
        _, feats = _detect(cloud, cfg, report)
        with report.timed("lines"):
            polylines = extract_polylines(feats, cloud) if len(feats) else []
        write_polylines(args.out, polylines)
        report.counts["polylines"] = len(polylines)
        report.counts["nodes"] = sum(len(p) for p in polylines)
        report.outputs.append(args.out)
        return
    if args.command == "enhance":
        _, feats = _detect(cloud, cfg, report)
        with report.timed("lines"):
            polylines = extract_polylines(feats, cloud) if len(feats) else []
        report.counts["polylines"] = len(polylines)
        with report.timed("enhance"):
            result = enhance(cloud, cfg.mode, cfg.delta, cfg.lam, cfg.k, cfg.adaptive,
                             cfg.radius_mult, cfg.noise, cfg.noise_radius_mult,
                             features=feats, polylines=polylines)
        write_cloud(args.out, result.cloud)
        report.counts["augmented_points"] = len(result.augmented)
        report.counts["enhance_set"] = len(result.partition.enhance_set)
        report.counts["maintain_set"] = len(result.partition.maintain_set)
        report.counts["unknowns"] = result.system.unknown_count
        report.counts["rows"] = result.system.row_count
        report.values["solver_residual"] = result.residual
        report.outputs.append(args.out)
        return
    raise InputError("unknown command %s" % args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    report = RunReport(args.command)
    try:
        run(args, report)
    except InputError as exc:
        print("input error: %s" % exc, file=sys.stderr)
        return 2
    except NumericalError as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3
    except RidgevalError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    print(report.render())
    return 0


if __name__ == "__main__":
    sys.exit(main())
