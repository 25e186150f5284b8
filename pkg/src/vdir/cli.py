"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 artifact/compatibility error,
4 diverged training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_model
from .data import (AWGN, HETEROSCEDASTIC, NoiseSpec, add_awgn, list_images, load_dataset, load_image,
                   save_image, synthesize_heteroscedastic)
from .losses import DivergedLoss, LossWeights
from .networks import MEAN, SAMPLE, NetworkConfig

log = logging.getLogger("vdir")

EXIT_CONFIG, EXIT_ARTIFACT, EXIT_DIVERGED = 2, 3, 4


class ConfigError(ValueError):
    pass


def runs_root() -> Path:
    return Path(os.environ.get("VDIR_RUNS_DIR", "runs"))


def write_manifest(run_dir: Path, command: str, config: dict, seed: int, start: float,
                   artifacts: list) -> Path:
    manifest = {
        "run": run_dir.name,
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "version": __version__,
        "seed": seed,
        "start": start,
        "end": time.time(),
        "artifacts": sorted(str(a) for a in artifacts),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# --- train --------------------------------------------------------------

TRAIN_KEYS = {
    "dataset": str, "preset": str, "name": str, "seed": int, "max_iters": int, "patch_size": int,
    "batch_size": int, "ablation": str, "beta": float, "lambda1": float, "lambda2": float,
    "noise_kind": str, "sigma_lo": float, "sigma_hi": float, "n_resblocks": int, "n_rirblocks": int,
    "base_channels": int, "disc_channels": int, "lr_init": float, "lr_floor": float,
    "lr_halving_interval": int, "checkpoint_every": int, "log_every": int, "grad_clip": float,
    "clip_noisy": bool, "split": str,
}


def load_train_options(args) -> dict:
    opts = {}
    if args.config:
        try:
            opts = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
        if not isinstance(opts, dict):
            raise ConfigError("config: top level must be a JSON object")
        if opts.get("command") == "train" and "config" in opts:
            # a run manifest: replay its option echo
            opts = dict(opts["config"]["options"])
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    for key, val in list(opts.items()):
        if key not in TRAIN_KEYS:
            raise ConfigError(f"{key}: unknown config key")
        typ = TRAIN_KEYS[key]
        try:
            opts[key] = typ(val) if val is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected {typ.__name__}, got {val!r}") from exc
    return opts


def build_train_config(opts: dict):
    from .trainer import TrainConfig

    preset = opts.get("preset", "awgn")
    try:
        cfg = TrainConfig.preset(preset)
    except ValueError as exc:
        raise ConfigError(f"preset: {exc}") from exc
    net = cfg.network.to_dict()
    for key, field in (("n_resblocks", "n_resblocks_per_rir"), ("n_rirblocks", "n_rirblocks"),
                       ("base_channels", "base_channels"), ("disc_channels", "disc_channels")):
        if key in opts:
            net[field] = opts[key]
    noise = cfg.noise_spec.to_dict()
    if "noise_kind" in opts:
        noise["kind"] = opts["noise_kind"]
    if "sigma_lo" in opts or "sigma_hi" in opts:
        noise["sigma_range"] = [opts.get("sigma_lo", noise["sigma_range"][0]),
                                opts.get("sigma_hi", noise["sigma_range"][1])]
    if "clip_noisy" in opts:
        noise["clip_output"] = opts["clip_noisy"]
    w = vars(cfg.loss_weights).copy()
    for key in ("beta", "lambda1", "lambda2"):
        if key in opts:
            w[key] = opts[key]
    fields = {k: opts[k] for k in ("seed", "max_iters", "patch_size", "batch_size", "ablation", "lr_init",
                                   "lr_floor", "lr_halving_interval", "checkpoint_every", "log_every",
                                   "grad_clip") if k in opts}
    try:
        return TrainConfig(noise_spec=NoiseSpec(**noise), loss_weights=LossWeights(**w),
                           network=NetworkConfig(**net), **{**_preset_fields(cfg), **fields})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def _preset_fields(cfg) -> dict:
    return {"patch_size": cfg.patch_size, "batch_size": cfg.batch_size}


def load_training_images(opts: dict):
    source = opts.get("dataset")
    if not source:
        raise ConfigError("dataset: missing required key (path to an image directory, a JSON manifest, "
                          "or 'toy' for the bundled sample corpus)")
    if source == "toy":
        from .corpus import toy_corpus
        return toy_corpus()[0]
    if not Path(source).exists():
        raise ConfigError(f"dataset: path {source} does not exist")
    images = load_dataset(source, opts.get("split", "train"))
    if not images:
        raise ConfigError(f"dataset: no PNG images found under {source}")
    return images


def cmd_train(args) -> int:
    from .plotting import plot_loss_curves
    from .trainer import train

    start = time.time()
    opts = load_train_options(args)
    cfg = build_train_config(opts)
    images = load_training_images(opts)
    name = opts.get("name") or f"{opts.get('preset', 'awgn')}_{cfg.ablation}_seed{cfg.seed}"
    run_dir = runs_root() / name
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = {"options": opts, "train_config": cfg.to_dict(), "fingerprint": cfg.fingerprint()}
    try:
        train(cfg, images, run_dir=run_dir, resume_from=args.resume, log_stream=sys.stdout)
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        write_manifest(run_dir, "train", echo, cfg.seed, start, list(run_dir.iterdir()))
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    if (run_dir / "log.jsonl").stat().st_size:
        plot_loss_curves(run_dir / "log.jsonl", run_dir / "loss_curves.png")
    write_manifest(run_dir, "train", echo, cfg.seed, start, [p.name for p in run_dir.iterdir()])
    print(str(run_dir))
    return 0


# --- denoise ------------------------------------------------------------

def _load_ckpt(path):
    try:
        return load_model(path)
    except (CheckpointError, FileNotFoundError, OSError) as exc:
        raise CheckpointError(str(exc)) from exc


def cmd_denoise(args) -> int:
    from .evaluator import MULTI_SAMPLE, denoise_image, self_ensemble

    model, meta = _load_ckpt(args.ckpt)
    inputs = []
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            inputs.extend((f, f.relative_to(p)) for f in list_images(p))
        elif p.exists():
            inputs.append((p, Path(p.name)))
        else:
            raise ConfigError(f"inputs: {p} does not exist")
    if not inputs:
        raise ConfigError("inputs: no PNG images found")
    out_dir = Path(args.out)
    mode = MULTI_SAMPLE if args.samples and args.samples > 1 else (SAMPLE if args.samples == 1 else MEAN)
    written = []
    for src, rel in inputs:
        y = load_image(src)
        if args.ensemble:
            x_hat = self_ensemble(model, y)
        else:
            x_hat = denoise_image(model, y, mode, args.samples or 1, args.seed)
        dst = out_dir / rel.with_suffix(".png")
        save_image(dst, x_hat)
        written.append({"input": str(src), "output": str(dst)})
    meta_out = {"checkpoint": str(args.ckpt), "ensemble": args.ensemble, "mode": mode,
                "samples": args.samples or 1, "seed": args.seed, "images": written}
    (out_dir / "denoise.json").write_text(json.dumps(meta_out, indent=2))
    return 0


# --- evaluate -----------------------------------------------------------

def _read_pairs_manifest(path):
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"manifest: cannot read {path}: {exc}") from exc
    if isinstance(entries, dict):
        entries = entries.get("pairs", [])
    pairs, ids = [], []
    for e in entries:
        clean = Path(e["clean"])
        noisy = Path(e["noisy"])
        clean = clean if clean.is_absolute() else path.parent / clean
        noisy = noisy if noisy.is_absolute() else path.parent / noisy
        pairs.append((load_image(clean), load_image(noisy)))
        ids.append(e.get("id", noisy.stem))
    return pairs, ids


def _parse_floats(text: str) -> list[float]:
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        return [float(v) for v in np.arange(lo, hi + step / 2, step)]
    return [float(v) for v in text.split(",") if v.strip()]


def _clean_images(args):
    if args.toy_heldout:
        from .corpus import SOURCES, toy_corpus
        return toy_corpus()[1], list(SOURCES)
    if not args.clean_dir:
        raise ConfigError("clean_dir: required with --sigma (or use --toy-heldout)")
    paths = list_images(args.clean_dir)
    if not paths:
        raise ConfigError(f"clean_dir: no PNG images under {args.clean_dir}")
    return [load_image(p) for p in paths], [p.stem for p in paths]


def cmd_evaluate(args) -> int:
    from .evaluator import awgn_pairs, evaluate_dataset
    from .plotting import plot_eval_report

    model, meta = _load_ckpt(args.ckpt)
    fp = meta.get("network_fingerprint")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    reports = {}
    if args.manifest:
        pairs, ids = _read_pairs_manifest(args.manifest)
        if not pairs:
            raise ConfigError("manifest: no pairs listed")
        reports["manifest"] = evaluate_dataset(model, pairs, ensemble=args.ensemble, ids=ids, model_fingerprint=fp)
    elif args.sigma:
        clean, ids = _clean_images(args)
        for s in _parse_floats(args.sigma):
            pairs = awgn_pairs(clean, s, seed=args.seed)
            spec = {"kind": AWGN, "sigma": s, "seed": args.seed, "clipped": True}
            rep, outs = evaluate_dataset(model, pairs, ensemble=args.ensemble, ids=ids, noise_spec=spec,
                                         model_fingerprint=fp, keep_outputs=True)
            reports[f"{s:g}"] = rep
            if args.save_images:
                for pid, img in zip(ids, outs):
                    save_image(Path(args.save_images) / f"sigma{s:g}" / f"{pid}.png", img)
    else:
        raise ConfigError("manifest: provide --manifest or --sigma")
    if len(reports) == 1:
        payload = next(iter(reports.values())).to_dict()
    else:
        payload = {k: r.to_dict() for k, r in reports.items()}
    out.write_text(json.dumps(payload, indent=2))
    for key, rep in reports.items():
        suffix = "" if len(reports) == 1 else f"_sigma{key}"
        plot_eval_report(rep.to_dict(), out.with_name(out.stem + suffix + ".png"))
        print(f"{key}: mean PSNR {rep.mean_psnr:.3f} dB, mean SSIM {rep.mean_ssim:.4f} over {rep.n_images} images")
    return 0


# --- synthesize ---------------------------------------------------------

def cmd_synthesize(args) -> int:
    paths = list_images(args.input)
    if not paths:
        raise ConfigError(f"input: no PNG images under {args.input}")
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    if args.kind == AWGN:
        lo, hi = _sigma_range(args)
        spec = NoiseSpec(kind=AWGN, sigma_range=(lo, hi), clip_output=True)
    else:
        spec = NoiseSpec(kind=HETEROSCEDASTIC)
    records, pairs = [], []
    root = Path(args.input)
    for p in paths:
        clean = load_image(p)
        rel = p.relative_to(root) if root.is_dir() else Path(p.name)
        if spec.kind == AWGN:
            lo, hi = spec.sigma_range
            sigma = float(rng.uniform(lo, hi)) if hi > lo else lo
            sample = add_awgn(clean, sigma, rng, clip=True)
            params = {"kind": AWGN, "sigma": sigma}
        else:
            sample = synthesize_heteroscedastic(clean, spec, rng)
            params = {"kind": HETEROSCEDASTIC, **sample.params["images"][0]}
        dst = out / rel.with_suffix(".png")
        save_image(dst, sample.noisy)
        records.append({"image": str(rel.with_suffix(".png")), **params})
        pairs.append({"id": rel.stem, "clean": str(p.resolve()), "noisy": str(dst.resolve())})
    (out / "noise.json").write_text(json.dumps({"seed": args.seed, "spec": spec.to_dict(), "images": records},
                                               indent=2))
    (out / "pairs.json").write_text(json.dumps(pairs, indent=2))
    return 0


def _sigma_range(args):
    if args.sigma is not None:
        return args.sigma, args.sigma
    if args.sigma_range:
        lo, hi = (float(v) for v in args.sigma_range.split(","))
        return lo, hi
    return 5.0, 70.0


# --- probe --------------------------------------------------------------

def _probe_images(args):
    if args.source:
        paths = list_images(args.source)
        if not paths:
            raise ConfigError(f"source: no PNG images under {args.source}")
        return [load_image(p) for p in paths], [p.stem for p in paths]
    from .corpus import SOURCES, toy_corpus
    return toy_corpus()[1], list(SOURCES)


def cmd_probe(args) -> int:
    from . import latent
    from .data import dihedral, extract_patch
    from .plotting import plot_heatmaps, plot_probe_panel

    model, _ = _load_ckpt(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    if args.probe == "flat":
        maps = {}
        for s in _parse_floats(args.sigmas):
            h = latent.flat_patch_probe(model, args.intensity, s, args.size, rng)
            latent.write_heatmap(out / f"flat_sigma{s:g}.png", h)
            maps[f"sigma {s:g}"] = h
        plot_heatmaps(maps, out / "flat_heatmaps_panel.png")
        summary = {k: float(v.mean()) for k, v in maps.items()}
        (out / "flat_summary.json").write_text(json.dumps(summary, indent=2))
    elif args.probe == "override":
        images, ids = _probe_images(args)
        rows = []
        for idx, (img, pid) in enumerate(zip(images, ids)):
            y_den = add_awgn(img, args.den_sigma, rng, clip=True).noisy
            y_enc = add_awgn(img, args.enc_sigma, rng, clip=True).noisy if args.enc_sigma != args.den_sigma else y_den
            if args.flip:
                y_enc = np.ascontiguousarray(dihedral(y_enc, 4))
            matched = latent.denoise_with_override(model, y_den, y_den, img)
            desc = {"encoder_input_id": pid, "denoiser_input_id": pid, "sigma_encoder": args.enc_sigma,
                    "sigma_denoiser": args.den_sigma, "transform": "flip" if args.flip else "none"}
            probe = latent.denoise_with_override(model, y_den, y_enc, img, desc)
            rows.append({**desc, "psnr_matched": matched.psnr_db, "psnr_override": probe.psnr_db})
            if idx == 0:
                plot_probe_panel({"noisy": y_den, "matched c": matched.x_hat, "override c": probe.x_hat,
                                  "clean": img}, out / "override_panel.png")
        frac = float(np.mean([r["psnr_matched"] > r["psnr_override"] for r in rows]))
        (out / "override.json").write_text(json.dumps({"fraction_matched_better": frac, "probes": rows}, indent=2))
        print(f"matched latent better on {frac:.0%} of {len(rows)} images")
    elif args.probe == "embed":
        images, _ = _probe_images(args)
        sigmas = _parse_floats(args.sigmas)
        rows = []
        for i in range(args.n):
            img = images[int(rng.integers(0, len(images)))]
            patch = extract_patch(img, args.size, rng)
            s = sigmas[int(rng.integers(0, len(sigmas)))]
            rows.append(latent.pooled_embedding(model, add_awgn(patch, s, rng).noisy, label=f"{s:g}"))
        latent.export_embeddings(rows, out / "embeddings.csv", plot_path=out / "embeddings_pca.png")
    return 0


# --- parser -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdir", description="Variational deep image denoiser")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; writes runs/<name>/")
    t.add_argument("--config", help="JSON file with flat keys; flags override it")
    t.add_argument("--dataset", help="image directory, JSON manifest, or 'toy'")
    t.add_argument("--preset", choices=["awgn", "real", "toy"])
    t.add_argument("--name")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-iters", dest="max_iters", type=int)
    t.add_argument("--patch-size", dest="patch_size", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--ablation", choices=["full", "no_adv", "denoise_only"])
    t.add_argument("--beta", type=float)
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise PNG files or directories")
    d.add_argument("--ckpt", required=True)
    d.add_argument("inputs", nargs="+")
    d.add_argument("--out", required=True)
    d.add_argument("--ensemble", action="store_true", help="8-way geometric self-ensemble")
    d.add_argument("--samples", type=int, default=0, help="average k sampled latents (0: mean latent)")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("evaluate", help="PSNR/SSIM report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", help="JSON list of {clean, noisy} paths")
    e.add_argument("--sigma", help="AWGN level(s), e.g. 30 or 10,30,50,70")
    e.add_argument("--clean-dir")
    e.add_argument("--toy-heldout", action="store_true", help="use the bundled held-out images")
    e.add_argument("--ensemble", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval_report.json")
    e.add_argument("--save-images")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synthesize", help="write noisy PNGs plus noise.json and pairs.json")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=[AWGN, HETEROSCEDASTIC], default=AWGN)
    s.add_argument("--sigma", type=float)
    s.add_argument("--sigma-range", dest="sigma_range")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthesize)

    pr = sub.add_parser("probe", help="latent-variable probes")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--seed", type=int, default=0)
    psub = pr.add_subparsers(dest="probe", required=True)
    o = psub.add_parser("override")
    o.add_argument("--enc-sigma", dest="enc_sigma", type=float, default=10.0)
    o.add_argument("--den-sigma", dest="den_sigma", type=float, default=30.0)
    o.add_argument("--flip", action="store_true")
    o.add_argument("--source")
    f = psub.add_parser("flat")
    f.add_argument("--sigmas", default="10,30,50")
    f.add_argument("--intensity", type=float, default=0.5)
    f.add_argument("--size", type=int, default=96)
    em = psub.add_parser("embed")
    em.add_argument("--n", type=int, default=1000)
    em.add_argument("--sigmas", default="10:55:5")
    em.add_argument("--size", type=int, default=64)
    em.add_argument("--source")
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    start = time.time()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    if code == 0 and args.command in ("denoise", "probe"):
        out = Path(args.out)
        if out.is_dir():
            write_manifest(out, args.command, vars_for_manifest(args), args.seed, start,
                           [p.name for p in out.iterdir()])
    return code


def vars_for_manifest(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


if __name__ == "__main__":
    sys.exit(main())
