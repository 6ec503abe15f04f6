"""Command-line entry point.

Subcommands::

    regionguide run MANIFEST [flags]      one pipeline run
    regionguide sweep MANIFEST [flags]    one run per grounding threshold
    regionguide compare DIR_A DIR_B       metric and per-region deltas
    regionguide demo DIR                  write a synthetic fixture

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric divergence.

Output directory layout (``run``)::

    restored.png                 decoded image
    run.json                     resolved configuration and artifact checksums
    metrics.json / metrics.txt   metric report (machine / human readable)
    steps.jsonl                  one JSON record per sampler step
    masks/ungrounded_HxW.png     ungrounded mask per attention resolution
    diagnostics/*.npy            final latent and step-1 noise fields
    heatmaps/TAG_layerK_HxW.png  attention heatmaps (with --export-attn)
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import RenormMode
from .config import DEFAULT_GUIDANCE_SCALE, DEFAULT_STEPS, DEFAULT_THRESHOLD
from .denoiser import (
    DenoiserSpec,
    RunConfig,
    SamplerSchedule,
    array_digest,
    decode,
    embed_tokens,
    encode,
    export_attention_maps,
    init_weights,
    reverse_sample,
)
from .errors import ComparisonError, NumericDivergenceError, RegionGuideError
from .guidance import GuidanceConfig
from .imageio import read_image, resize_box, to_u8, write_image
from .masks import ResamplePolicy, ground, load_tag_file, save_mask_image, tokenize
from .metrics import format_table, format_value, psnr, region_metric, ssim

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4

DEFAULTS = {
    "srca": True,
    "stcfg": True,
    "renorm": "per_pixel",
    "threshold": DEFAULT_THRESHOLD,
    "steps": DEFAULT_STEPS,
    "scale": DEFAULT_GUIDANCE_SCALE,
    "seed": 0,
    "weights_seed": 0,
    "resample": "any_coverage",
    "export_attn": False,
    "strength": 0.6,
    "upscale": 4,
    "unconditional": False,
    "denoiser": {},
}

_RENORM_FLAGS = {"per-pixel": "per_pixel", "global": "global"}
_RESAMPLE_FLAGS = {"any": "any_coverage", "majority": "majority", "nearest": "nearest"}


class ManifestError(RegionGuideError, ValueError):
    pass


@dataclasses.dataclass
class PipelineManifest:
    input_image: Path
    tag_file: Path
    output_dir: Path
    reference_image: Path | None = None
    config: dict = dataclasses.field(default_factory=lambda: dict(DEFAULTS))
    metrics: tuple = ("psnr", "ssim")
    thresholds: tuple = ()

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, path.parent)

    @classmethod
    def from_dict(cls, doc, base=Path(".")):
        base = Path(base)
        for key in ("input_image", "tag_file", "output_dir"):
            if key not in doc:
                raise ManifestError(f"manifest lacks {key!r}")
        unknown = set(doc.get("config", {})) - set(DEFAULTS)
        if unknown:
            raise ManifestError(f"unknown config keys {sorted(unknown)}")
        metrics = tuple(doc.get("metrics", ("psnr", "ssim")))
        if set(metrics) - {"psnr", "ssim"}:
            raise ManifestError(f"unsupported metrics {metrics}")
        ref = doc.get("reference_image")
        return cls(
            input_image=base / doc["input_image"],
            tag_file=base / doc["tag_file"],
            output_dir=base / doc["output_dir"],
            reference_image=None if ref is None else base / ref,
            config={**DEFAULTS, **doc.get("config", {})},
            metrics=metrics,
            thresholds=tuple(float(t) for t in doc.get("sweep", {}).get("thresholds", ())),
        )

    def override(self, **changes):
        cfg = dict(self.config)
        out_dir = changes.pop("output_dir", None)
        cfg.update({k: v for k, v in changes.items() if v is not None})
        return dataclasses.replace(self, config=cfg, output_dir=Path(out_dir) if out_dir else self.output_dir)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _denoiser_spec(cfg):
    extra = dict(cfg.get("denoiser") or {})
    extra.setdefault("seed", int(cfg["weights_seed"]))
    return DenoiserSpec(**extra)


def build_run(manifest: PipelineManifest):
    """Load inputs and assemble everything a run needs, without sampling."""
    cfg = manifest.config
    threshold = float(cfg["threshold"])
    spec = _denoiser_spec(cfg)
    policy = ResamplePolicy(cfg["resample"])
    for p in (manifest.input_image, manifest.tag_file):
        if not Path(p).is_file():
            raise FileNotFoundError(f"missing input file {p}")
    image = read_image(manifest.input_image)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    tags = load_tag_file(manifest.tag_file)
    base = spec.base_resolution
    pairs = [p if p.resolution == base else p.resampled(base, policy) for p in tags.pairs]
    layout = tags.layout()
    grounding = ground(pairs, layout, spec.resolutions, threshold, policy)
    run = RunConfig(
        denoiser=spec,
        schedule=SamplerSchedule.ddim(int(cfg["steps"]), strength=float(cfg["strength"])),
        guidance=GuidanceConfig(float(cfg["scale"]), bool(cfg["stcfg"])),
        srca_enabled=bool(cfg["srca"]),
        renorm=RenormMode(cfg["renorm"]),
        grounding=grounding,
        seed=int(cfg["seed"]),
        unconditional_only=bool(cfg["unconditional"]),
    )
    return run, image, layout, grounding


def run_pipeline(manifest: PipelineManifest):
    """Execute one run and write its artifacts. Returns the metric report dict."""
    cfg = manifest.config
    run, image, layout, grounding = build_run(manifest)
    spec = run.denoiser
    weights = init_weights(spec)
    cond = embed_tokens(layout.token_ids, weights)
    uncond_layout = tokenize("", max_length=layout.num_tokens)
    uncond = embed_tokens(uncond_layout.token_ids, weights)
    source = encode(resize_box(image, spec.base_resolution), weights)

    export = bool(cfg["export_attn"])
    final, diag = reverse_sample(run, cond, uncond, weights, source=source, record_attention=export)
    restored = decode(final, weights, int(cfg["upscale"]))

    out = Path(manifest.output_dir)
    for sub in ("masks", "diagnostics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_image(out / "restored.png", restored)
    for res, um in grounding.ungrounded.items():
        save_mask_image(out / "masks" / f"ungrounded_{res[0]}x{res[1]}.png", um.mask)
    first = diag.steps[0]
    np.save(out / "diagnostics" / "final_latent.npy", final)
    np.save(out / "diagnostics" / "step1_eps_uncond.npy", first.eps_uncond)
    np.save(out / "diagnostics" / "step1_eps_blended.npy", first.eps_blended)
    if first.eps_cond is not None:
        np.save(out / "diagnostics" / "step1_eps_cond.npy", first.eps_cond)

    ungrounded = grounding.ungrounded[spec.base_resolution].mask
    with open(out / "steps.jsonl", "w") as fh:
        for rec in diag.steps:
            e = rec.eps_blended
            row = {
                "step": rec.step,
                "timestep": rec.timestep,
                "latent_rms": float(np.sqrt(np.mean(rec.latent ** 2))),
                "eps_rms": float(np.sqrt(np.mean(e ** 2))),
                "guidance_rms_grounded": _masked_rms(e - rec.eps_uncond, ~ungrounded),
                "guidance_rms_ungrounded": _masked_rms(e - rec.eps_uncond, ungrounded),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    if export:
        (out / "heatmaps").mkdir(exist_ok=True)
        for p in grounding.retained:
            maps = export_attention_maps(diag, layout, p.tag, step="mean")
            for li, grid in enumerate(maps):
                h, w = grid.shape
                write_image(out / "heatmaps" / f"{_slug(p.tag)}_layer{li}_{h}x{w}.png", grid[None])

    report = {
        "retained_tags": [p.tag for p in grounding.retained],
        "threshold": grounding.threshold,
        "grounded_coverage": grounding.coverage(spec.base_resolution),
        "metrics": {},
        "regions": {},
    }
    if manifest.reference_image is not None:
        report["metrics"], report["regions"] = _metrics_against(
            manifest.reference_image, restored, ungrounded, int(cfg["upscale"]), manifest.metrics)
    _dump(out / "metrics.json", _jsonable(report))
    rows = [{"region": "all", **report["metrics"]}]
    rows += [{"region": k, **v} for k, v in report["regions"].items()]
    (out / "metrics.txt").write_text(format_table(rows, ["region", *manifest.metrics]) + "\n")

    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "run.json")
    _dump(out / "run.json", {
        "version": __version__,
        "config": _jsonable({k: v for k, v in cfg.items()}),
        "base_resolution": list(spec.base_resolution),
        "resolutions": [list(r) for r in spec.resolutions],
        "timesteps": list(run.schedule.timesteps),
        "prompt_tokens": [t.text for t in layout.tokens],
        "final_latent_digest": array_digest(final),
        "artifacts": {a: _sha256(out / a) for a in artifacts},
    })
    return report


def _slug(tag):
    return "".join(ch if ch.isalnum() else "_" for ch in tag)


def _masked_rms(x, mask):
    if not mask.any():
        return None
    return float(np.sqrt(np.mean(x[:, mask] ** 2)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        return format_value(obj, 10) if math.isinf(obj) else obj
    return obj


def _metrics_against(ref_path, restored, ungrounded, upscale, metrics):
    ref = read_image(ref_path)
    if ref.shape[0] == 1:
        ref = np.repeat(ref, 3, axis=0)
    if ref.shape != restored.shape:
        raise ManifestError(f"reference {ref.shape} does not match output {restored.shape}")
    # compare in 8-bit space, as the files on disk would be
    out8 = to_u8(restored).astype(np.float64)
    ref8 = to_u8(ref).astype(np.float64)
    glob = {}
    if "psnr" in metrics:
        glob["psnr"] = psnr(ref8, out8, 255.0)
    if "ssim" in metrics:
        glob["ssim"] = ssim(ref8, out8, 255.0)
    up = np.repeat(np.repeat(ungrounded, upscale, axis=0), upscale, axis=1)
    regions = {}
    for name, region in (("grounded", ~up), ("ungrounded", up)):
        vals = {}
        for m in metrics:
            try:
                vals[m] = region_metric(ref8, out8, region, m, 255.0)
            except RegionGuideError:
                vals[m] = None
        regions[name] = vals
    return glob, regions


def threshold_sweep(manifest: PipelineManifest, thresholds):
    """One run per threshold into ``output_dir/sweep/t_X.XX``; returns the report rows."""
    thresholds = sorted(float(t) for t in thresholds)
    if not thresholds:
        raise ManifestError("sweep needs at least one threshold")
    root = Path(manifest.output_dir)
    rows = []
    for t in thresholds:
        sub = manifest.override(threshold=t, output_dir=root / "sweep" / f"t_{t:.2f}")
        rep = run_pipeline(sub)
        rows.append({
            "threshold": t,
            "retained": len(rep["retained_tags"]),
            "coverage": rep["grounded_coverage"],
            "psnr": rep["metrics"].get("psnr"),
            "ssim": rep["metrics"].get("ssim"),
        })
    for a, b in zip(rows, rows[1:]):
        if b["retained"] > a["retained"] or b["coverage"] > a["coverage"]:
            raise RegionGuideError("sweep rows violate threshold monotonicity")
    root.mkdir(parents=True, exist_ok=True)
    _dump(root / "sweep.json", _jsonable({"rows": rows}))
    (root / "sweep.txt").write_text(format_table(rows, ["threshold", "retained", "coverage", "psnr", "ssim"]) + "\n")
    return rows


def _load_run(d):
    d = Path(d)
    meta = json.loads((d / "run.json").read_text())
    metrics = json.loads((d / "metrics.json").read_text())
    return meta, metrics


def compare_runs(dir_a, dir_b):
    """Deltas ``b - a`` of metrics, step-1 noise and the final image, split by region.

    Regions come from run A's base-resolution ungrounded mask.
    """
    from .masks import load_mask_image

    (meta_a, met_a), (meta_b, met_b) = _load_run(dir_a), _load_run(dir_b)
    for key in ("base_resolution", "timesteps"):
        if meta_a[key] != meta_b[key]:
            raise ComparisonError(f"runs differ in {key}: {meta_a[key]} vs {meta_b[key]}")
    if meta_a["config"]["upscale"] != meta_b["config"]["upscale"]:
        raise ComparisonError("runs differ in upscale")
    h, w = meta_a["base_resolution"]
    ung = load_mask_image(Path(dir_a) / "masks" / f"ungrounded_{h}x{w}.png")
    up = int(meta_a["config"]["upscale"])
    ung_img = np.repeat(np.repeat(ung, up, axis=0), up, axis=1)

    def region_delta(x, y, mask):
        if not mask.any():
            return {"max_abs": None, "identical": None}
        d = float(np.max(np.abs(x[:, mask] - y[:, mask])))
        return {"max_abs": d, "identical": d == 0.0}

    def delta(key):
        a, b = met_a["metrics"].get(key), met_b["metrics"].get(key)
        if a is None or b is None:
            return None
        if isinstance(a, str) or isinstance(b, str):
            return 0.0 if a == b else ("inf" if isinstance(b, str) else "-inf")
        return b - a

    eps_a = np.load(Path(dir_a) / "diagnostics" / "step1_eps_blended.npy")
    eps_b = np.load(Path(dir_b) / "diagnostics" / "step1_eps_blended.npy")
    img_a = read_image(Path(dir_a) / "restored.png")
    img_b = read_image(Path(dir_b) / "restored.png")
    lat_a = np.load(Path(dir_a) / "diagnostics" / "final_latent.npy")
    lat_b = np.load(Path(dir_b) / "diagnostics" / "final_latent.npy")
    regions = {}
    for name, m, mi in (("grounded", ~ung, ~ung_img), ("ungrounded", ung, ung_img)):
        regions[name] = {
            "step1_eps": region_delta(eps_a, eps_b, m),
            "final_latent": region_delta(lat_a, lat_b, m),
            "image": region_delta(img_a, img_b, mi),
        }
    metric_deltas = {k: delta(k) for k in sorted(set(met_a["metrics"]) | set(met_b["metrics"]))}
    region_metric_deltas = {}
    for name in sorted(set(met_a.get("regions", {})) & set(met_b.get("regions", {}))):
        ra, rb = met_a["regions"][name], met_b["regions"][name]
        region_metric_deltas[name] = {
            k: (None if ra.get(k) is None or rb.get(k) is None or isinstance(ra[k], str) or isinstance(rb[k], str)
                else rb[k] - ra[k])
            for k in sorted(set(ra) & set(rb))
        }
    return {
        "metrics": metric_deltas,
        "region_metrics": region_metric_deltas,
        "regions": regions,
        "identical": meta_a["final_latent_digest"] == meta_b["final_latent_digest"],
    }


def _on_off(v):
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _add_run_flags(p):
    p.add_argument("manifest", type=Path)
    p.add_argument("--srca", type=_on_off, metavar="{on,off}")
    p.add_argument("--stcfg", type=_on_off, metavar="{on,off}")
    p.add_argument("--renorm", choices=sorted(_RENORM_FLAGS))
    p.add_argument("--threshold", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--export-attn", action="store_true", default=None)
    p.add_argument("--resample", choices=sorted(_RESAMPLE_FLAGS))
    p.add_argument("--output-dir", type=Path)


def _manifest_from_args(args):
    m = PipelineManifest.load(args.manifest)
    return m.override(
        srca=args.srca, stcfg=args.stcfg,
        renorm=_RENORM_FLAGS.get(args.renorm), threshold=args.threshold,
        steps=args.steps, scale=args.scale, seed=args.seed,
        export_attn=args.export_attn, resample=_RESAMPLE_FLAGS.get(args.resample),
        output_dir=args.output_dir,
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="regionguide", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="run the pipeline once"))
    sw = sub.add_parser("sweep", help="sweep grounding thresholds")
    _add_run_flags(sw)
    sw.add_argument("--thresholds", help="comma-separated list; defaults to the manifest's sweep list")
    cmp_ = sub.add_parser("compare", help="compare two run directories")
    cmp_.add_argument("run_a", type=Path)
    cmp_.add_argument("run_b", type=Path)
    cmp_.add_argument("--json", type=Path, help="also write the report here")
    demo = sub.add_parser("demo", help="write a synthetic fixture directory")
    demo.add_argument("directory", type=Path)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "run":
            report = run_pipeline(_manifest_from_args(args))
            print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
        elif args.command == "sweep":
            m = _manifest_from_args(args)
            ts = [float(t) for t in args.thresholds.split(",")] if args.thresholds else list(m.thresholds)
            rows = threshold_sweep(m, ts)
            print(format_table(rows, ["threshold", "retained", "coverage", "psnr", "ssim"]))
        elif args.command == "compare":
            report = _jsonable(compare_runs(args.run_a, args.run_b))
            if args.json:
                _dump(args.json, report)
            print(json.dumps(report, indent=2, sort_keys=True))
        elif args.command == "demo":
            from .fixtures import write_demo

            print(write_demo(args.directory))
    except NumericDivergenceError as exc:
        return _fail(EXIT_DIVERGENCE, "numeric_divergence", exc, step=exc.step)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except (RegionGuideError, ValueError, TypeError, KeyError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    return EXIT_OK


def _fail(code, kind, exc, **extra):
    diag = {"error": kind, "type": type(exc).__name__, "message": str(exc), **extra}
    print(json.dumps(diag, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
