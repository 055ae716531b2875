"""Command-line orchestration: fetch -> train -> design -> simulate ->
evaluate -> sweep, with reproducible run capture.

Exit codes: 0 success, 2 user/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaconv",
                                description="meta-optic convolution toolkit")
    p.add_argument("--config", type=Path, default=None,
                   help="TOML (or JSON) run configuration overlaying the defaults")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", type=Path, default=Path("runs/latest"),
                   help="output directory (locked while the command runs)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads (set before numpy loads)")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fetch", help="download datasets into the cache")
    f.add_argument("--dataset", choices=("mnist", "fashion-mnist", "all"),
                   default="all")
    f.add_argument("--cache", type=Path, default=None)

    t = sub.add_parser("train", help="train the digital hybrid model")
    t.add_argument("--dataset", choices=("mnist", "fashion-mnist"), default="mnist")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--limit", type=int, default=None,
                   help="train on only the first N images")
    t.add_argument("--backend", choices=("auto", "numpy", "ext"), default="auto")

    d = sub.add_parser("design", help="compile kernels into phase profiles")
    d.add_argument("--model", type=Path, default=None, help=".hmod checkpoint")
    d.add_argument("--kernels", type=Path, default=None, help="kernel JSON file")
    d.add_argument("--channel", type=int, default=None,
                   help="design a single channel instead of all")
    d.add_argument("--joint", action="store_true",
                   help="joint multi-channel off-axis design (one aperture)")
    d.add_argument("--no-atoms", action="store_true",
                   help="skip the meta-atom CSV export")

    l = sub.add_parser("lens-design", help="optimize the coma-free doublet")

    s = sub.add_parser("simulate-psf", help="simulate and extract one channel PSF")
    s.add_argument("--model", type=Path, default=None)
    s.add_argument("--kernels", type=Path, default=None)
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--imperfection", type=str, default=None,
                   help="comma list like dx_um=65,epsilon=0.05")

    e = sub.add_parser("evaluate", help="hybrid-vs-digital classification")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--dataset", choices=("mnist", "fashion-mnist"), default="mnist")
    e.add_argument("--n-images", type=int, default=None)
    e.add_argument("--imperfection", type=str, default=None)

    w = sub.add_parser("sweep-id", help="accuracy vs pixel size + information density")
    w.add_argument("--model", type=Path, required=True)
    w.add_argument("--dataset", choices=("mnist", "fashion-mnist"), default="mnist")
    w.add_argument("--pixel-sizes", type=str, default=None,
                   help="comma list of pixel sizes in um, descending")
    w.add_argument("--n-images", type=int, default=None)

    r = sub.add_parser("report", help="re-render SVG plots from run CSVs")
    r.add_argument("--run", type=Path, required=True, help="existing run directory")
    return p


def _parse_imperfection(spec_str, base):
    if not spec_str:
        return base
    from dataclasses import replace
    from .errors import ConfigError
    mapping = {"epsilon": "zeroth_order_fraction", "dx_um": "dx_um",
               "dy_um": "dy_um", "dz_um": "dz_um", "noise_sigma": "noise_sigma",
               "seed": "seed"}
    kw = {}
    for item in spec_str.split(","):
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in mapping:
            raise ConfigError(f"unknown imperfection key {key!r}")
        kw[mapping[key]] = int(val) if mapping[key] == "seed" else float(val)
    return replace(base, **kw)


class _OutDirLock:
    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            from .errors import ConfigError
            raise ConfigError(
                f"output directory {self.path.parent} is locked by another run")
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)


def _write_run_json(out: Path, args, cfg: dict) -> None:
    doc = {"command": args.command,
           "argv": sys.argv[1:],
           "config": cfg,
           "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    (out / "run.json").write_text(json.dumps(doc, indent=1, default=str))


def _load_dataset(name, split, limit=None):
    from .data import dataset_available, default_cache_dir, load_split
    from .errors import FetchError
    if not dataset_available(name):
        raise FetchError(
            f"dataset {name!r} not in cache {default_cache_dir()}; "
            "run `metaconv fetch` first")
    ds = load_split(name, split)
    return ds.subset(limit) if limit else ds


def _load_kernels(args, rcfg):
    from .errors import ConfigError
    from .neural import load_model, normalize_for_optics
    from .synthesis import kernels_from_json
    if args.model is not None:
        model = load_model(args.model)
        if float(abs(model.conv_kernels).max()) > 1.0 + 1e-12:
            model = normalize_for_optics(model)
        return model.kernels_signed()
    if args.kernels is not None:
        return kernels_from_json(args.kernels)
    raise ConfigError("provide --model or --kernels")


def cmd_fetch(args, rcfg, out):
    from .data import fetch_dataset
    names = ["mnist", "fashion-mnist"] if args.dataset == "all" else [args.dataset]
    for name in names:
        paths = fetch_dataset(name, cache_dir=args.cache)
        print(f"{name}: {len(paths)} files ready")
    return 0


def cmd_train(args, rcfg, out):
    import numpy as np
    from . import conv as conv_backend
    from .data import confusion, confusion_to_csv, confusion_to_svg
    from .neural import accuracy, normalize_for_optics, predict, save_model, train

    backend = conv_backend if args.backend == "auto" \
        else conv_backend.get_backend(args.backend)
    train_set = _load_dataset(args.dataset, "train", args.limit)
    test_set = _load_dataset(args.dataset, "test")
    tcfg = rcfg.training(epochs=args.epochs)

    def progress(entry):
        acc = entry.get("test_accuracy")
        acc_s = f" test_acc={acc:.4f}" if acc is not None else ""
        print(f"epoch {entry['epoch']:3d} loss={entry['train_loss']:.4f}"
              f"{acc_s} ({entry['seconds']}s)", flush=True)

    model = train(train_set, tcfg, test_set=test_set, backend=backend,
                  progress=progress)
    model = normalize_for_optics(model)
    model.metadata["dataset"] = args.dataset
    acc = accuracy(model, test_set.images, test_set.labels, backend)
    model.metadata["test_accuracy"] = acc
    save_model(model, out / "model.hmod")

    cm = confusion(lambda imgs: predict(model, imgs, backend=backend), test_set)
    confusion_to_csv(cm, out / "confusion.csv")
    confusion_to_svg(cm, out / "confusion.svg", f"{args.dataset} digital")
    epochs = model.metadata.get("epochs", [])
    with open(out / "epochs.csv", "w") as fh:
        fh.write("epoch,train_loss,test_accuracy,seconds\n")
        for e in epochs:
            fh.write(f"{e['epoch']},{e['train_loss']:.6f},"
                     f"{e.get('test_accuracy', '')},{e['seconds']}\n")
    (out / "metrics.json").write_text(json.dumps(
        {"dataset": args.dataset, "test_accuracy": acc,
         "norm_constant": model.norm_constant,
         "backend": getattr(backend, "BACKEND", getattr(backend, "NAME", "?")),
         "epochs": epochs}, indent=1))
    print(f"test accuracy: {acc:.4f}")
    return 0


def cmd_design(args, rcfg, out):
    import numpy as np
    from .errors import DegenerateInputError
    from .pipeline import design_channel
    from .synthesis import (atom_map_from_profiles, build_ms1_profiles,
                            coherent_efficiency, export_atom_csv, window_powers)
    from .wave import GridSpec, write_cfield

    kernels = _load_kernels(args, rcfg)
    if args.channel is not None:
        kernels = [k for k in kernels if k.channel_id == args.channel]
    if not kernels or all(not np.any(k.weights) for k in kernels):
        raise DegenerateInputError("no non-zero kernel to design")
    cfg = rcfg.optical()
    dz = rcfg.raw["design"]
    proj_kw = dict(grid_n=dz["grid_n"], multi_start=dz["multi_start"],
                   coarse_n=dz["coarse_n"], max_iters=dz["max_iters"],
                   tol=dz["tol"], compensate=dz["compensate"],
                   comp_iters=dz["comp_iters"], comp_beta=dz["comp_beta"],
                   optimizer=dz["optimizer"])

    report = {"channels": [], "config_c": cfg.c}
    grid = GridSpec(dz["grid_n"], cfg.aperture_d1_um / dz["grid_n"])

    if args.joint:
        design = build_ms1_profiles(kernels, cfg, seed=rcfg.seed,
                                    **{k: v for k, v in proj_kw.items()
                                       if k != "grid_n"}, grid_n=dz["grid_n"])
        profs = {"rcp": design.profile_rcp, "lcp": design.profile_lcp}
        for pol, prof in profs.items():
            ax = grid.axis()
            write_cfield(out / f"ms1_{pol}.cfield", prof.phase_at(ax, ax),
                         grid.pitch, cfg.wavelength_um)
            report[f"{pol}_coherent_efficiency"] = coherent_efficiency(
                prof, cfg, grid_n=min(dz["grid_n"], 512))
        if not args.no_atoms:
            atoms = atom_map_from_profiles(design.profile_lcp, design.profile_rcp,
                                           grid)
            export_atom_csv(atoms, grid, out / "atoms.csv")
    else:
        for kern in kernels:
            design = design_channel(kern, cfg, seed=rcfg.seed + 10 * kern.channel_id,
                                    **proj_kw)
            entry = {"channel": kern.channel_id}
            for pol, prof in (("rcp", design.profile_rcp),
                              ("lcp", design.profile_lcp)):
                if prof is None:
                    entry[pol] = None
                    continue
                eff = coherent_efficiency(prof, cfg, grid_n=min(dz["grid_n"], 512))
                p = window_powers(prof, cfg, grid_n=min(dz["grid_n"], 512))
                part = (np.maximum(kern.weights, 0) if pol == "rcp"
                        else np.maximum(-kern.weights, 0)).ravel()
                active = part > 0
                corr = (float(np.corrcoef(p[active], part[active])[0, 1])
                        if active.sum() > 1 else 1.0)
                entry[pol] = {"coherent_efficiency": eff,
                              "window_power_sum": float(p.sum()),
                              "window_corr_vs_weights": corr}
                ax = grid.axis()
                write_cfield(out / f"ms1_ch{kern.channel_id}_{pol}.cfield",
                             prof.phase_at(ax, ax), grid.pitch, cfg.wavelength_um)
            report["channels"].append(entry)
            print(f"channel {kern.channel_id}: "
                  + ", ".join(f"{pol}={entry[pol]['coherent_efficiency']:.4f}"
                              for pol in ("rcp", "lcp") if entry[pol]))
        if not args.no_atoms and kernels:
            design = design_channel(kernels[0], cfg, seed=rcfg.seed, **proj_kw)
            from .synthesis import flat_profile
            pl = design.profile_lcp or flat_profile(cfg.wavelength_um,
                                                    cfg.aperture_d1_um)
            pr = design.profile_rcp or flat_profile(cfg.wavelength_um,
                                                    cfg.aperture_d1_um)
            atoms = atom_map_from_profiles(pl, pr, grid)
            export_atom_csv(atoms, grid, out / "atoms.csv")
    (out / "efficiency_report.json").write_text(json.dumps(report, indent=1))
    return 0


def cmd_lens_design(args, rcfg, out):
    import numpy as np
    from .lens import (optimize_coma_free, optimize_single_surface,
                       single_surface_spot, surface_to_json, trace_spot)
    cfg = rcfg.lens_optical()
    lens_cfg = rcfg.raw["lens"]
    angles = tuple(lens_cfg["field_angles_deg"])
    ms1, ms2, history = optimize_coma_free(
        cfg, field_angles_deg=angles, rings=lens_cfg["rings"], seed=rcfg.seed,
        nm_restarts=lens_cfg["nm_restarts"], shift_penalty=lens_cfg["shift_penalty"])
    surface_to_json(ms1, "ms1", out / "ms1.json")
    surface_to_json(ms2, "ms2", out / "ms2.json")
    single = optimize_single_surface(cfg, field_angles_deg=angles,
                                     rings=lens_cfg["rings"])

    rows = ["x_um,y_um,field_deg"]
    table = {"merit_history": [float(m) for m in history], "angles": {}}
    for th in angles:
        spot = trace_spot(ms1, ms2, cfg, th, rings=lens_cfg["rings"])
        sspot = single_surface_spot(single, cfg, th, rings=lens_cfg["rings"])
        table["angles"][str(th)] = {
            "doublet_rms_um": spot.rms_radius, "doublet_centroid": spot.centroid,
            "single_rms_um": sspot.rms_radius, "vignetted": spot.n_vignetted}
        rows += [f"{x:.4f},{y:.4f},{th}" for x, y in spot.xy]
    (out / "spots.csv").write_text("\n".join(rows) + "\n")
    (out / "lens_report.json").write_text(json.dumps(table, indent=1))
    print(f"merit {history[0]:.3f} -> {history[-1]:.3f} "
          f"({history[0] / history[-1]:.1f}x)")
    return 0


def cmd_simulate_psf(args, rcfg, out):
    import numpy as np
    from .imaging import extract_effective_kernel
    from .pipeline import design_channel, simulate_channel_psf
    from .wave import write_cfield

    kernels = _load_kernels(args, rcfg)
    kern = next((k for k in kernels if k.channel_id == args.channel), None)
    if kern is None:
        from .errors import ConfigError
        raise ConfigError(f"channel {args.channel} not present")
    cfg = rcfg.optical()
    imp = _parse_imperfection(args.imperfection, rcfg.imperfection())
    dz = rcfg.raw["design"]
    design = design_channel(kern, cfg, seed=rcfg.seed, grid_n=dz["grid_n"],
                            multi_start=dz["multi_start"], coarse_n=dz["coarse_n"],
                            compensate=dz["compensate"])
    from .wave import GridSpec
    sim = rcfg.raw["sim"]
    grid = GridSpec(sim["grid_n"], sim["pitch_um"])
    psf = simulate_channel_psf(design, cfg, imperfection=imp, grid=grid)
    write_cfield(out / "psf_rcp.cfield", psf.rcp, psf.pitch, cfg.wavelength_um)
    write_cfield(out / "psf_lcp.cfield", psf.lcp, psf.pitch, cfg.wavelength_um)
    eff = extract_effective_kernel(psf, cfg, kern.shape, channel_id=kern.channel_id)
    target = kern.weights / np.abs(kern.weights).max()
    corr = float(np.corrcoef(eff.weights.ravel(), target.ravel())[0, 1])
    mad = float(np.mean(np.abs(eff.weights - target)))
    np.savetxt(out / "effective_kernel.csv", eff.weights, delimiter=",")
    (out / "psf_report.json").write_text(json.dumps(
        {"channel": kern.channel_id, "correlation": corr,
         "mean_abs_deviation": mad, "epsilon": imp.zeroth_order_fraction,
         "dx_um": imp.dx_um, "dz_um": imp.dz_um}, indent=1))
    print(f"effective kernel corr={corr:.5f} mad={mad:.5f}")
    return 0


def cmd_evaluate(args, rcfg, out):
    import numpy as np
    from .data import (ConfusionMatrix, confusion, confusion_to_csv,
                       confusion_to_svg)
    from .imaging import fidelity_sigma, incoherent_convolve_continuous, convolve_discrete
    from .neural import accuracy, load_model, predict
    from .pipeline import (effective_kernels_for_model, hybrid_predict,
                           simulate_channel_psf, design_channel)

    model = load_model(args.model)
    cfg = rcfg.optical()
    imp = _parse_imperfection(args.imperfection, rcfg.imperfection())
    n_images = args.n_images or rcfg.raw["evaluate"]["n_images"]
    test = _load_dataset(args.dataset, "test")
    subset = test.subset(n_images)

    digital_acc = accuracy(model, subset.images, subset.labels)
    eff = effective_kernels_for_model(
        model, cfg, seed=rcfg.seed, imperfection=imp,
        design_grid_n=rcfg.raw["design"]["grid_n"],
        progress=lambda ch, e: print(f"channel {ch} designed", flush=True))
    preds = hybrid_predict(model, subset.images, eff)
    hybrid_acc = float((preds == subset.labels).mean())

    cm = confusion(lambda imgs: hybrid_predict(model, imgs, eff), subset)
    confusion_to_csv(cm, out / "confusion_hybrid.csv")
    confusion_to_svg(cm, out / "confusion_hybrid.svg",
                     f"{args.dataset} hybrid (optics)")

    # sigma report: continuous optical path vs digital on one test image
    ch0 = model.kernels_signed()[0]
    design = design_channel(ch0, cfg, seed=rcfg.seed,
                            grid_n=rcfg.raw["design"]["grid_n"])
    psf = simulate_channel_psf(design, cfg, imperfection=imp)
    chart = subset.images[0]
    fm = incoherent_convolve_continuous(chart, psf).maps[ch0.channel_id]
    dig = convolve_discrete(chart, ch0)
    sigma = fidelity_sigma(dig, fm)

    (out / "evaluation.json").write_text(json.dumps(
        {"dataset": args.dataset, "n_images": n_images,
         "digital_accuracy": digital_acc, "hybrid_accuracy": hybrid_acc,
         "gap_pp": 100 * (digital_acc - hybrid_acc), "sigma_channel0": sigma,
         "imperfection": {"epsilon": imp.zeroth_order_fraction,
                          "dx_um": imp.dx_um, "dy_um": imp.dy_um,
                          "dz_um": imp.dz_um}}, indent=1))
    print(f"digital={digital_acc:.4f} hybrid={hybrid_acc:.4f} "
          f"gap={100 * (digital_acc - hybrid_acc):.2f}pp sigma={sigma:.5f}")
    return 0


def cmd_sweep_id(args, rcfg, out):
    import numpy as np
    from .neural import load_model
    from .pipeline import sweep_information_density

    model = load_model(args.model)
    cfg = rcfg.optical()
    sweep_cfg = rcfg.raw["sweep"]
    sizes = ([float(s) for s in args.pixel_sizes.split(",")]
             if args.pixel_sizes else sweep_cfg["pixel_sizes_um"])
    n_images = args.n_images or sweep_cfg["n_images"]
    test = _load_dataset(args.dataset, "test").subset(n_images)
    rows = sweep_information_density(
        model, cfg, test.images, test.labels, sizes,
        design_grid_n=sweep_cfg["design_grid_n"], seed=rcfg.seed,
        progress=lambda r: print(f"dp={r['pixel_um']:>5} um  "
                                 f"acc={r['accuracy']:.4f}  "
                                 f"ID={r['information_density_per_um2']:.3e}",
                                 flush=True))
    with open(out / "sweep.csv", "w") as fh:
        fh.write("pixel_um,accuracy,information_density_per_um2,mean_kernel_corr\n")
        for r in rows:
            fh.write(f"{r['pixel_um']},{r['accuracy']:.6f},"
                     f"{r['information_density_per_um2']:.8e},"
                     f"{r['mean_kernel_corr']:.6f}\n")
    _render_sweep_svg(out / "sweep.csv", out / "sweep.svg")
    return 0


def _render_sweep_svg(csv_path: Path, svg_path: Path) -> None:
    import csv as _csv
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    rows = list(_csv.DictReader(open(csv_path)))
    dp = [float(r["pixel_um"]) for r in rows]
    acc = [100 * float(r["accuracy"]) for r in rows]
    idd = [float(r["information_density_per_um2"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(5.5, 3.6))
    ax1.plot(dp, acc, "o-", color="tab:blue")
    ax1.set_xlabel("pixel size (um)")
    ax1.set_ylabel("accuracy (%)", color="tab:blue")
    ax1.invert_xaxis()
    ax2 = ax1.twinx()
    ax2.semilogy(dp, idd, "s--", color="tab:red")
    ax2.set_ylabel("information density (px/um^2)", color="tab:red")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def cmd_report(args, rcfg, out):
    from .data import ConfusionMatrix, confusion_to_svg
    import numpy as np
    run = args.run
    made = []
    sweep_csv = run / "sweep.csv"
    if sweep_csv.exists():
        _render_sweep_svg(sweep_csv, run / "sweep.svg")
        made.append("sweep.svg")
    for name in ("confusion", "confusion_hybrid"):
        csv_path = run / f"{name}.csv"
        if csv_path.exists():
            counts = np.loadtxt(csv_path, delimiter=",", skiprows=1,
                                usecols=range(1, 11), dtype=np.int64)
            confusion_to_svg(ConfusionMatrix(counts), run / f"{name}.svg")
            made.append(f"{name}.svg")
    print("rendered: " + (", ".join(made) if made else "nothing to do"))
    return 0


_COMMANDS = {"fetch": cmd_fetch, "train": cmd_train, "design": cmd_design,
             "lens-design": cmd_lens_design, "simulate-psf": cmd_simulate_psf,
             "evaluate": cmd_evaluate, "sweep-id": cmd_sweep_id,
             "report": cmd_report}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .config import RunConfig, load_config
    from .errors import MetaconvError, NumericError

    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
        rcfg = RunConfig(cfg)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        with _OutDirLock(out):
            _write_run_json(out, args, cfg)
            return _COMMANDS[args.command](args, rcfg, out)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except MetaconvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
