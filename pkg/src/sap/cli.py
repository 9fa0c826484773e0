"""Command-line entry points: generate, dict, detect, eval, render.

Every artifact-producing command writes a run manifest next to its output
recording the resolved configuration, seeds and input content hashes, so a
run can be replayed bit-identically.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import load_hsi, normalize, save_hsi
from .dictionary import DictConfig, build_dictionary, load_dictionary, save_dictionary
from .metrics import evaluate, render_map
from .prior import CnnExtractor, DetectionMap, PriorConfig, RandomConvExtractor
from .pseudo import GenConfig, emit_dataset
from .solver import AnomalyPriorHandle, BaselineConfig, SolverConfig, SolverDivergence, solve, solve_l21
from .weights import load_weights


def worker_count() -> int:
    """Worker cap honoring the SAP_THREADS environment variable."""
    cap = os.environ.get("SAP_THREADS")
    avail = os.cpu_count() or 1
    if cap is None:
        return avail
    try:
        return max(1, min(avail, int(cap)))
    except ValueError:
        return avail


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_container(path) -> dict:
    from .core import _container_paths

    hdr, raw = _container_paths(path)
    out = {}
    if hdr.exists():
        out[str(hdr)] = _hash_file(hdr)
    if raw.exists():
        out[str(raw)] = _hash_file(raw)
    if not out and Path(path).exists():
        out[str(path)] = _hash_file(path)
    return out


def _write_manifest(out_path, command: str, config: dict, inputs: dict, outputs: list, t0: float):
    config = {k: v for k, v in config.items() if isinstance(v, (str, int, float, bool, type(None)))}
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config,
        "input_hashes": inputs,
        "outputs": [str(o) for o in outputs],
        "wall_clock_s": round(time.monotonic() - t0, 3),
    }
    p = Path(str(out_path) + ".run.json")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_score_map(path) -> DetectionMap:
    cube = load_hsi(path)
    if cube.bands != 1:
        raise ValueError(f"score map container must have bands=1, got {cube.bands}")
    return DetectionMap(cube.data[0], normalized=True)


def cmd_generate(args) -> int:
    t0 = time.monotonic()
    src_dir = Path(args.sources)
    headers = sorted(src_dir.glob("*.hdr.json"))
    if not headers:
        raise FileNotFoundError(f"no .hdr.json containers under {src_dir}")
    sources = [load_hsi(h) for h in headers]
    bands = sources[0].bands
    cfg = GenConfig(
        vertex_range=(args.min_vertices, args.max_vertices),
        area_fraction_range=(args.min_area, args.max_area),
        band_count_range=(1, min(args.max_bands or bands, bands)),
        seed=args.seed,
    )
    manifest = emit_dataset(sources, cfg, args.out, workers=worker_count())
    inputs = {}
    for h in headers:
        inputs.update(_hash_container(h))
    _write_manifest(Path(args.out) / "manifest.json", "generate", vars(args), inputs, [args.out], t0)
    print(f"wrote {len(manifest['entries'])} labeled images under {args.out}")
    return 0


def cmd_dict(args) -> int:
    t0 = time.monotonic()
    cube = normalize(load_hsi(args.input))
    cfg = DictConfig(
        n_clusters=args.clusters,
        drop_quantile=args.drop_q,
        latent_backend=args.backend,
        latent_dim=args.latent_dim,
        seed=args.seed,
    )
    _latent, dictionary = build_dictionary(cube, cfg)
    save_dictionary(dictionary, args.out)
    _write_manifest(args.out, "dict", vars(args), _hash_container(args.input), [args.out], t0)
    print(f"dictionary: {dictionary.nb} atoms of dim {dictionary.atoms.shape[0]} -> {args.out}")
    return 0


def _parse_prior(spec: str, input_bands: int, feature_dim: int):
    kind, _, arg = spec.partition(":")
    if kind == "fallback":
        seed = int(arg) if arg else 0
        return RandomConvExtractor(input_bands, feature_dim, seed)
    if kind == "cnn":
        if not arg:
            raise ValueError("cnn prior needs a weights path: cnn:<weights>")
        w = load_weights(arg)
        if w.input_bands != input_bands:
            raise ValueError(f"weights expect {w.input_bands} bands, latent has {input_bands}")
        return CnnExtractor(w)
    raise ValueError(f"unknown prior spec {spec!r} (use cnn:<weights> or fallback:<seed>)")


def cmd_detect(args) -> int:
    t0 = time.monotonic()
    cube = normalize(load_hsi(args.input))
    dictionary = load_dictionary(args.dict)
    dict_cfg = DictConfig(latent_backend=args.backend, latent_dim=dictionary.atoms.shape[0], seed=args.seed)
    from .dictionary import extract_latent

    latent = extract_latent(cube, dict_cfg)
    solver_cfg = SolverConfig(max_iter=args.max_iter, tol=args.tol)

    if args.baseline_l21 is not None:
        result = solve_l21(latent.matrix, dictionary, BaselineConfig(args.baseline_l21), solver_cfg)
    else:
        prior_cfg = PriorConfig(cube_size=args.cube, stride=args.stride, threshold_method=args.threshold)
        extractor = _parse_prior(args.prior, latent.dim, prior_cfg.feature_dim)
        prior = AnomalyPriorHandle(extractor, prior_cfg)
        result = solve(latent.matrix, dictionary, prior, solver_cfg)

    from .core import HsiCube

    save_hsi(HsiCube(result.detection_map.scores[None, :, :]), args.out)
    history_path = str(args.out) + ".history.csv"
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "primal_residual", "data_fit"])
        for rec in result.history:
            writer.writerow([rec.iteration, f"{rec.primal_residual:.9e}", f"{rec.data_fit:.9e}"])
    inputs = _hash_container(args.input)
    inputs.update(_hash_container(args.dict))
    _write_manifest(args.out, "detect", vars(args), inputs, [args.out, history_path], t0)
    status = "converged" if result.converged else "max_iter"
    print(f"detect: {result.iterations} iterations ({status}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    dmap = _load_score_map(args.scores)
    truth_cube = load_hsi(args.truth)
    if truth_cube.bands != 1:
        raise ValueError("truth mask container must have bands=1")
    truth = truth_cube.data[0]
    if not np.isin(truth, (0.0, 1.0)).all():
        raise ValueError("truth mask must be binary")
    report = evaluate(dmap, truth.astype(np.uint8))
    row = report.as_dict()
    with open(args.report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow({k: f"{v:.6f}" for k, v in row.items()})
    inputs = _hash_container(args.scores)
    inputs.update(_hash_container(args.truth))
    _write_manifest(args.report, "eval", vars(args), inputs, [args.report], t0)
    print(", ".join(f"{k}={v:.5f}" for k, v in row.items()))
    return 0


def cmd_render(args) -> int:
    t0 = time.monotonic()
    dmap = _load_score_map(args.scores)
    render_map(dmap, args.out)
    _write_manifest(args.out, "render", vars(args), _hash_container(args.scores), [args.out], t0)
    print(f"rendered {args.out}")
    return 0


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """--config <json> supplies defaults that explicit flags still override."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    try:
        cfg_path = argv[idx + 1]
    except IndexError:
        parser.error("--config requires a path")
    overrides = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
    if not isinstance(overrides, dict):
        parser.error("--config file must hold a JSON object")
    argv = argv[:idx] + argv[idx + 2 :]
    extra: list[str] = []
    for key, value in overrides.items():
        flag = "--" + key.replace("_", "-")
        if flag in argv:
            continue  # explicit flag wins
        extra.extend([flag, str(value)])
    return argv + extra


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a labeled pseudo-anomaly dataset")
    p.add_argument("--sources", required=True, help="directory of source HSI containers")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-area", type=float, default=0.005)
    p.add_argument("--max-area", type=float, default=0.05)
    p.add_argument("--min-vertices", type=int, default=3)
    p.add_argument("--max-vertices", type=int, default=8)
    p.add_argument("--max-bands", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("dict", help="build the purified background dictionary")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=["pca", "linear_ae"], default="pca")
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--drop-q", type=float, default=0.10)
    p.add_argument("--latent-dim", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dict)

    p = sub.add_parser("detect", help="run the solver and write the score map")
    p.add_argument("--input", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--prior", default="fallback:0", help="cnn:<weights> or fallback:<seed>")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline-l21", type=float, default=None, metavar="BETA")
    p.add_argument("--max-iter", type=int, default=30)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--cube", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--threshold", choices=["otsu", "mean_plus_k_sigma"], default="otsu")
    p.add_argument("--backend", choices=["pca", "linear_ae"], default="pca")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score a detection map against ground truth")
    p.add_argument("--scores", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a score map as an 8-bit graymap")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


_ERROR_CATEGORIES = (
    (FileNotFoundError, "io"),
    (PermissionError, "io"),
    (SolverDivergence, "numeric"),
    (json.JSONDecodeError, "format"),
    (ValueError, "config"),
    (OSError, "io"),
)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except tuple(cls for cls, _ in _ERROR_CATEGORIES) as exc:
        for cls, category in _ERROR_CATEGORIES:
            if isinstance(exc, cls):
                print(f"error: {category}: {exc}", file=sys.stderr)
                return 1
        raise  # unreachable


if __name__ == "__main__":
    sys.exit(main())
