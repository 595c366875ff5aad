"""Command-line front end. Each subcommand is one pipeline stage; all outputs live
under a single experiment directory.

Exit codes: 0 success, 2 configuration error, 3 data-schema error,
4 solver or training convergence failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from sklearn.metrics import r2_score

from . import config as cfgmod
from . import dataio, hypersearch, kbnn, pipeline, svgplot
from .config import ConfigError
from .dataio import SchemaError
from .features import FEATURE_NAMES
from .mechtest import FrozenFrameTester, MechTestError, sample_loadings
from .nn import autodiff as ad
from .nn import load_network, save_network
from .nn.layers import Conv2D
from .nn.optim import NonFiniteLoss, TrainConfig, mse_loss_fn
from .phasefield import ConvergenceError, GridSpec, MaterialParams, SimConfig, StepFailureError
from .utils import RNG_NAME, derive_seed

EXIT_OK, EXIT_CONFIG, EXIT_SCHEMA, EXIT_CONVERGENCE = 0, 2, 3, 4

log = logging.getLogger("spinodal_kbnn")

MODELS = ("enn-dnn", "enn-cnn", "kbnn", "kbnn-cnn")
BENCH_COLUMNS = ("path", "n", "total_s", "per_item_s")


class ConvergenceFailure(RuntimeError):
    """One or more independent units (runs, tests) failed to converge."""


# ---------------------------------------------------------------------------
# helpers


def _exp(args, cfg) -> Path:
    return Path(args.exp or cfg.paths.root)


def _runs_root(args, cfg) -> Path:
    return _exp(args, cfg) / "runs"


def _run_dirs(args, cfg, ids=None) -> list[Path]:
    root = _runs_root(args, cfg)
    dirs = sorted(p for p in root.glob("run_*") if (p / "run.json").exists())
    if ids:
        wanted = set(ids)
        dirs = [d for d in dirs if d.name in wanted]
        missing = wanted - {d.name for d in dirs}
        if missing:
            raise SchemaError(f"unknown run(s): {', '.join(sorted(missing))}")
    if not dirs:
        raise SchemaError(f"no simulated runs under {root}")
    return dirs


def _grid(cfg) -> GridSpec:
    s = cfg.simulation
    return GridSpec(s.nx, s.ny, s.Lx, s.Ly)


def _material(cfg) -> MaterialParams:
    return MaterialParams(**asdict(cfg.material))


def _sim_config(cfg, seed: int) -> SimConfig:
    s = asdict(cfg.simulation)
    return SimConfig(**{f.name: s[f.name] for f in fields(SimConfig) if f.name != "seed"}, seed=seed)


def _manifest(command, cfg, directory, seeds=None, files=(), filename="manifest.json", **extra) -> Path:
    m = dataio.Manifest(command, cfg.to_dict(), dict(seeds or {}), extra={"rng": RNG_NAME, **extra})
    for f in files:
        m.add(f, directory)
    return m.write(directory, filename)


def _pool_map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, *zip(*jobs)))
    return [fn(*job) for job in jobs]


# ---------------------------------------------------------------------------
# simulate / featurize / mechtest / dataset


def _simulate_one(run_dir, sim, bc, grid, params, run_id):
    try:
        pipeline.simulate(run_dir, sim, bc, grid, params, run_id)
    except (ConvergenceError, StepFailureError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return None


def cmd_simulate(args, cfg):
    n = args.runs or cfg.simulation.runs
    master = cfg.seeds.master if args.seed is None else args.seed
    root = _runs_root(args, cfg)
    root.mkdir(parents=True, exist_ok=True)
    bcs = pipeline.sample_bcs(n, derive_seed(master, "bc"), cfg.simulation.bc_low, cfg.simulation.bc_high)
    seeds = {pipeline.run_id_for(i): derive_seed(master, "run", i) for i in range(n)}
    jobs = [
        (root / rid, _sim_config(cfg, seed), bcs[i], _grid(cfg), _material(cfg), rid)
        for i, (rid, seed) in enumerate(seeds.items())
    ]
    errors = _pool_map(_simulate_one, jobs, args.workers)
    failed = {rid: err for rid, err in zip(seeds, errors) if err}
    for rid, err in failed.items():
        print(f"{rid}: FAILED ({err})", file=sys.stderr)
    for rid in seeds:
        if rid not in failed:
            print(f"{rid}: ok")
    _manifest(
        "simulate", cfg, root, {"master": master, **seeds},
        bcs={rid: asdict(bc) for rid, bc in zip(seeds, bcs)}, failed=failed,
    )  # fmt: skip
    if failed:
        raise ConvergenceFailure(f"{len(failed)} of {n} runs failed")


def cmd_featurize(args, cfg):
    for rd in _run_dirs(args, cfg, args.run):
        rows = pipeline.featurize(rd, cfg.features.include_outer_boundary)
        print(f"{rd.name}: {len(rows)} frames featurized")


def _mechtest_one(run_dir, frames, tests, seed, m):
    rows = pipeline.mechtest(
        run_dir, frames, tests, seed, m.tol, m.max_iters, m.normal_range, m.shear_range, m.save_perturbed
    )
    return len(rows), len(frames) * tests


def cmd_mechtest(args, cfg):
    m = cfg.mechtest
    master = cfg.seeds.master if args.seed is None else args.seed
    seed = derive_seed(master, "mechtest")
    per_run = args.frames_per_run or m.frames_per_run
    tests = args.tests_per_frame or m.tests_per_frame
    dirs = _run_dirs(args, cfg, args.run)
    jobs = []
    for rd in dirs:
        if not (rd / "features.csv").exists():
            raise SchemaError(f"{rd.name}: run featurize first")
        jobs.append((rd, pipeline.default_frames(pipeline.read_run(rd), per_run), tests, seed, m))
    results = _pool_map(_mechtest_one, jobs, args.workers)
    lost = 0
    for rd, (ok, total) in zip(dirs, results):
        print(f"{rd.name}: {ok}/{total} tests converged")
        lost += total - ok
    _manifest("mechtest", cfg, _runs_root(args, cfg), {"master": master, "mechtest": seed},
              filename="mechtest_manifest.json", frames_per_run=per_run, tests_per_frame=tests)
    if lost:
        raise ConvergenceFailure(f"{lost} mechanical tests failed")


def cmd_dataset(args, cfg):
    out = Path(args.out) if args.out else _exp(args, cfg) / "datasets" / f"{args.kind}.csv"
    dirs = _run_dirs(args, cfg, args.run)
    if args.kind in ("D_I", "D_II"):
        if args.kind == "D_I" and len(dirs) != 1:
            raise SchemaError("D_I is built from exactly one run (use --run)")
        ds = pipeline.base_dataset(dirs, out, discard=cfg.simulation.discard, name=args.kind)
    else:
        ds = pipeline.mech_dataset(dirs, out, name="D_IV")
        if args.kind == "D_III":
            ids = ds["microstructure_id"]
            pick = args.microstructure or str(ids[0])
            rows = np.flatnonzero(ids == pick)
            if not len(rows):
                raise SchemaError(f"no tests for microstructure {pick}")
            ds = replace(ds.subset(rows), schema=dataio.SCHEMAS["D_III"])
            dataio.save_dataset(ds, out)
    print(f"{args.kind}: {len(ds)} rows -> {out}")


# ---------------------------------------------------------------------------
# train / predict


def _train_config(args, cfg, seed) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        epochs=args.epochs or t.epochs,
        lr0=t.lr0,
        v_decay=t.v_decay,
        n_decay=t.n_decay,
        batch_size=args.batch_size or t.batch_size,
        seed=seed,
    )


def _history_csv(history, path):
    n = len(history["epoch"])
    rows = [
        {
            "epoch": history["epoch"][i],
            "lr": history["lr"][i],
            "train_loss": history["train_loss"][i],
            "val_loss": history["val_loss"][i] if history["val_loss"] else "",
        }
        for i in range(n)
    ]
    dataio.write_csv(path, rows, ("epoch", "lr", "train_loss", "val_loss"))


def _learning_curve(history, path, title):
    series = {"train": (history["epoch"], history["train_loss"])}
    if history["val_loss"]:
        series["validation"] = (history["epoch"], history["val_loss"])
    svgplot.line_chart(path, series, title=title)


def _split(n, cfg, seed):
    return dataio.split(n, dataio.SplitSpec(cfg.training.test_fraction, cfg.search.K, seed))


def _enn_loss(net, x, y) -> float:
    with ad.no_grad():
        return float(mse_loss_fn(net, x, y)().data)


def _kbnn_loss(model, data) -> float:
    return float(kbnn.training_loss_fn(model, data, kbnn.shifted_labels(model, data))().data)


def cmd_train(args, cfg):
    beta = cfg.training.beta if args.penalize is None else args.penalize
    if not beta >= 0:
        raise ConfigError(f"--penalize must be non-negative, got {beta}")
    master = cfg.seeds.master if args.seed is None else args.seed
    seed = derive_seed(master, "train", args.model)
    out = Path(args.out) if args.out else _exp(args, cfg) / "models" / args.model
    out.mkdir(parents=True, exist_ok=True)
    tcfg = _train_config(args, cfg, seed)
    ds = dataio.load_dataset(args.dataset)
    tr, te = _split(len(ds), cfg, derive_seed(master, "split"))

    if args.model.startswith("enn"):
        ds.expect("D_I", "D_II")
        x, y = kbnn.enn_arrays(ds, "features" if args.model == "enn-dnn" else "image")
        if args.model == "enn-dnn":
            net = kbnn.enn_dnn(tuple(cfg.training.enn_hidden), len(FEATURE_NAMES), seed)
        else:
            preset = kbnn.enn_cnn_multi if args.variant == "multi" else kbnn.enn_cnn_single
            net = preset(x.shape[1:3], seed)
        history = kbnn.train_enn(net, x[tr], y[tr], tcfg, x[te], y[te])
        ckpt = save_network(net, out, "enn")
        final = _enn_loss(net, x[tr], y[tr])
        pred = net.predict(x[te]).ravel()
        metrics = {"Psi_mech_0": float(r2_score(y[te], pred))} if len(te) > 1 else {}
    else:
        ds.expect("D_III", "D_IV")
        if not args.enn:
            raise ConfigError("--enn checkpoint is required for KBNN training")
        enn = load_network(args.enn)
        cnn = args.model == "kbnn-cnn"
        mnn_image = (args.mnn_image or cfg.training.mnn_image or "original") if cnn else None
        data = kbnn.data_from_dataset(ds, perturbed=mnn_image == "perturbed")
        image_shape = data.original.images.shape[1:] if data.original is not None else (61, 61)
        mnn = (
            kbnn.mnn_cnn_enhanced(image_shape, seed)
            if cnn
            else kbnn.mnn_plain(tuple(cfg.training.mnn_hidden), seed)
        )
        model = kbnn.KBNNModel(
            enn,
            mnn,
            enn_input="features" if len(enn.input_shape) == 1 else "image",
            mnn_image=mnn_image,
            beta=beta,
            boundary_only=args.boundary_only or cfg.training.boundary_only,
            shift_source=cfg.training.shift_source,
        )
        train_data, test_data = data.subset(tr), data.subset(te)
        history = kbnn.train_kbnn(model, train_data, tcfg, test_data)
        ckpt = kbnn.save_model(model, out)
        final = _kbnn_loss(model, train_data)
        metrics = {k: float(v) for k, v in kbnn.evaluate(model, test_data).items()} if len(te) > 1 else {}

    _history_csv(history, out / "loss_history.csv")
    _learning_curve(history, out / "learning_curve.svg", args.model)
    (out / "split.json").write_text(json.dumps({"train": tr.tolist(), "test": te.tolist()}) + "\n")
    _manifest(
        "train", cfg, out, {"master": master, "train": seed},
        files=[ckpt, out / "loss_history.csv", out / "learning_curve.svg", out / "split.json"],
        model=args.model, dataset=str(Path(args.dataset).resolve()), checkpoint=ckpt.name,
        final_train_loss=final, test_r2=metrics, beta=beta,
        enn_hash=history.get("enn_hash"),
    )  # fmt: skip
    print(f"checkpoint: {ckpt}")
    print(f"final training loss: {final:.17g}")
    for k, v in metrics.items():
        print(f"R2 {k}: {v:.6f}")


def _select_rows(args, ckpt: Path, n: int):
    if args.rows == "all":
        return np.arange(n)
    split = json.loads((ckpt.parent / "split.json").read_text())
    return np.asarray(split[args.rows], dtype=np.intp)


def cmd_predict(args, cfg):
    ckpt = Path(args.checkpoint)
    ds = dataio.load_dataset(args.dataset)
    rows = _select_rows(args, ckpt, len(ds))
    out = Path(args.out) if args.out else ckpt.parent / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    meta = json.loads(ckpt.read_text())
    cols, panels = {}, {}
    if meta.get("format") == "spinodal-kbnn-model/1":
        ds.expect("D_III", "D_IV")
        model = kbnn.load_model(ckpt)
        data = kbnn.data_from_dataset(ds, perturbed=model.mnn_image == "perturbed").subset(rows)
        dpsi, psi = kbnn.predict_energy(model, data)
        P, P_ref = kbnn.predict_stress(model, data).reshape(-1, 4), data.P.reshape(-1, 4)
        dy = kbnn.shifted_labels(model, data)
        cols.update(Psi_pred=psi, dPsi_pred=dpsi, Psi=data.psi, dPsi=dy)
        panels.update(Psi=(data.psi, psi), dPsi=(dy, dpsi))
        for k, name in enumerate(dataio.STRESS_COLUMNS):
            cols[f"{name}_pred"], cols[name] = P[:, k], P_ref[:, k]
            panels[name] = (P_ref[:, k], P[:, k])
        loss = _kbnn_loss(model, data)
    else:
        ds.expect("D_I", "D_II")
        net = load_network(ckpt)
        x, y = kbnn.enn_arrays(ds, "features" if len(net.input_shape) == 1 else "image")
        pred = net.predict(x[rows]).ravel()
        cols.update(Psi_mech_0_pred=pred, Psi_mech_0=y[rows])
        panels["Psi_mech_0"] = (y[rows], pred)
        loss = _enn_loss(net, x[rows], y[rows])
    keys = [c for c in ds.schema.keys if c in ds.columns]
    table = [{**{k: ds[k][r] for k in keys}, **{c: v[i] for c, v in cols.items()}} for i, r in enumerate(rows)]
    dataio.write_csv(out / "predictions.csv", table, (*keys, *cols))
    svgplot.parity_plot(out / "parity.svg", panels)
    r2 = {name: float(r2_score(a, p)) for name, (a, p) in panels.items()} if len(rows) > 1 else {}
    _manifest(
        "predict", cfg, out, files=[out / "predictions.csv", out / "parity.svg"],
        checkpoint=str(ckpt.resolve()), rows=args.rows, loss=loss, r2=r2,
    )  # fmt: skip
    print(f"loss: {loss:.17g}")
    for name, v in r2.items():
        print(f"R2 {name}: {v:.6f}")


# ---------------------------------------------------------------------------
# search / activations / bench


def cmd_search(args, cfg):
    s = cfg.search
    master = cfg.seeds.master if args.seed is None else args.seed
    ds = dataio.load_dataset(args.dataset, expect=("D_I", "D_II"))
    x, y = kbnn.enn_arrays(ds, "features" if args.space == "dense" else "image")
    space = hypersearch.SearchSpace(
        args.space, s.n_hl, s.n_npl, s.n_fpl, tuple(x.shape[1:])
    )
    scfg = hypersearch.SearchConfig(
        stages=s.stages, samples_per_stage=s.samples_per_stage, K=s.K, top_fraction=s.top_fraction,
        epochs_per_trial=args.epochs or s.epochs_per_trial, seed=derive_seed(master, "search"),
        lr0=s.lr0, v_decay=s.v_decay, n_decay=s.n_decay, batch_size=s.batch_size,
    )  # fmt: skip
    out = Path(args.out) if args.out else _exp(args, cfg) / "search" / args.space
    out.mkdir(parents=True, exist_ok=True)

    def show(t):
        print(f"stage {t.stage} {t.candidate.key:>14} V={t.v_total:<7} loss={t.mean_loss:.6g} {t.status}")

    result = hypersearch.run_search(space, x, y, scfg, progress=show, workers=args.workers)
    hypersearch.write_log(result, out / "search_log.csv")
    winner = {**result.best.row(), "candidate": result.best.candidate.to_dict(), "bounds": result.bounds}
    (out / "winner.json").write_text(json.dumps(winner, indent=2, sort_keys=True) + "\n")
    _manifest("search", cfg, out, {"master": master, "search": scfg.seed}, [out / "search_log.csv", out / "winner.json"])
    print(f"winner: {result.best.candidate.key} (V={result.best.v_total}, mean loss {result.best.mean_loss:.6g})")


def _activation_source(ckpt: Path):
    meta = json.loads(ckpt.read_text())
    if meta.get("format") == "spinodal-kbnn-model/1":
        model = kbnn.load_model(ckpt)
        return model.enn if len(model.enn.input_shape) == 3 else model.mnn
    return load_network(ckpt)


def first_conv_maps(net, image) -> np.ndarray:
    """(filters, H', W') post-activation output of the first convolution layer."""
    idx = next((i for i, l in enumerate(net.layers) if isinstance(l, Conv2D)), None)
    if idx is None:
        raise SchemaError(f"{net.name} has no convolution layer")
    img = np.asarray(image, dtype=float)
    if img.shape != tuple(net.input_shape[:2]):
        raise SchemaError(f"image shape {img.shape} does not match network input {tuple(net.input_shape)}")
    return np.moveaxis(net.activations(img[None, ..., None], idx)[0], -1, 0)


def cmd_activations(args, cfg):
    net = _activation_source(Path(args.checkpoint))
    if args.image:
        image = dataio.load_image(args.image)
    elif args.dataset:
        ds = dataio.load_dataset(args.dataset)
        image = dataio.load_image(ds.image_paths()[args.row])
    else:
        raise ConfigError("give --image or --dataset")
    maps = first_conv_maps(net, image)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "activations"
    out.mkdir(parents=True, exist_ok=True)
    files = [svgplot.write_pgm(out / f"filter_{k + 1:02d}.pgm", m) for k, m in enumerate(maps)]
    files.append(svgplot.image_grid(out / "activations.svg", list(maps)))
    np.save(out / "activations.npy", maps)
    print(f"{len(maps)} filter maps -> {out}")


def cmd_bench(args, cfg):
    ckpt = Path(args.checkpoint)
    ds = dataio.load_dataset(args.dataset, expect=("D_III", "D_IV"))
    model = kbnn.load_model(ckpt)
    data = kbnn.data_from_dataset(ds, perturbed=model.mnn_image == "perturbed")
    n = len(data)
    rows = []
    t0 = time.perf_counter()
    for _ in range(args.repeats):
        kbnn.predict_energy(model, data)
        kbnn.predict_stress(model, data)
    t_nn = time.perf_counter() - t0
    rows.append({"path": "kbnn_predict", "n": n * args.repeats, "total_s": t_nn, "per_item_s": t_nn / (n * args.repeats)})

    mid = str(ds["microstructure_id"][0])
    rid, frame = mid.split("/f")
    run_dir = Path(args.runs_dir) if args.runs_dir else _runs_root(args, cfg)
    run_dir = run_dir / rid
    meta = pipeline.read_run(run_dir)
    state, grid, _ = dataio.read_frame(dataio.frame_path(run_dir, int(frame)))
    tester = FrozenFrameTester(state, grid, MaterialParams(**meta["material"]), mid)
    specs = sample_loadings(args.dns_tests, derive_seed(cfg.seeds.master, "bench"), grid)
    t0 = time.perf_counter()
    for t, spec in enumerate(specs):
        tester.run(spec, t, tol=cfg.mechtest.tol, max_iters=cfg.mechtest.max_iters)
    t_dns = time.perf_counter() - t0
    rows.append({"path": "dns_test", "n": len(specs), "total_s": t_dns, "per_item_s": t_dns / len(specs)})
    speedup = rows[1]["per_item_s"] / rows[0]["per_item_s"]
    rows.append({"path": "speedup_dns_over_nn", "n": 1, "total_s": "", "per_item_s": speedup})
    out = Path(args.out) if args.out else _exp(args, cfg) / "bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_csv(out, rows, BENCH_COLUMNS)
    for r in rows:
        print(f"{r['path']}: {r['per_item_s']:.4g}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spinodal-kbnn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"JSON config file (default: ${cfgmod.ENV_VAR} or built-in defaults)")
    p.add_argument("--exp", help="experiment directory (default: paths.root from the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="phase-evolution runs with sampled boundary loads")
    s.add_argument("--runs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("featurize", help="microstructure features and e2 images per frame")
    s.add_argument("--run", action="append", help="run id (repeatable; default all)")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("mechtest", help="perturbation tests on selected frames")
    s.add_argument("--run", action="append")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames-per-run", type=int)
    s.add_argument("--tests-per-frame", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_mechtest)

    s = sub.add_parser("dataset", help="assemble D_I, D_II, D_III or D_IV")
    s.add_argument("--kind", required=True, choices=tuple(dataio.SCHEMAS))
    s.add_argument("--run", action="append")
    s.add_argument("--microstructure", help="microstructure id for D_III (default: first)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train an ENN or a KBNN")
    s.add_argument("--model", required=True, choices=MODELS)
    s.add_argument("--dataset", required=True)
    s.add_argument("--enn", help="ENN checkpoint (KBNN models)")
    s.add_argument("--penalize", type=float, metavar="BETA", help="stress penalty weight")
    s.add_argument("--boundary-only", action="store_true")
    s.add_argument("--mnn-image", choices=("original", "perturbed"))
    s.add_argument("--variant", choices=("single", "multi"), default="single", help="ENN-CNN preset")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="staged K-fold search over network size")
    s.add_argument("--space", required=True, choices=("dense", "conv"))
    s.add_argument("--dataset", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("predict", help="predictions CSV, parity plot and R2")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--rows", choices=("all", "train", "test"), default="all")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("activations", help="first-layer filter maps for one e2 image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image")
    s.add_argument("--dataset")
    s.add_argument("--row", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_activations)

    s = sub.add_parser("bench", help="prediction latency against DNS test time")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--runs-dir")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--dns-tests", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConvergenceFailure, ConvergenceError, StepFailureError, MechTestError, NonFiniteLoss) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
