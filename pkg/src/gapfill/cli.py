"""Command-line interface: simulate, krige, frk fit/predict, pipeline, validate."""

import json
import os
import sys

import click
import numpy as np
import yaml

from . import __version__
from .covariance import (
    CovarianceFunction,
    binned_indicator,
    exponential,
    separable_exp,
    simulate_unconditional,
)
from .frk import (
    build_basis_planar,
    build_basis_sphere_time,
    fit_em,
    frk_predict,
    load_fitted,
    save_fitted,
)
from .geometry import planar_points, sphere_points
from .kriging import Dataset, simple_krige
from .pipeline import (
    PipelineConfig,
    ReferenceRecord,
    read_retrievals,
    reference_colocate,
    run_pipeline,
    validation_report,
    validate_products,
)

THREADS_ENV = "GAPFILL_THREADS"


def _load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return data or {}


def _read_points_csv(path):
    """Points file: columns x,y[,t] (planar) or lon,lat[,t] (sphere)."""
    import csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    t = np.array([float(r.get("t", 0.0) or 0.0) for r in rows])
    if "lon" in cols and "lat" in cols:
        lonlat = np.array([[float(r["lon"]), float(r["lat"])] for r in rows])
        return sphere_points(lonlat, t)
    if "x" in cols and "y" in cols:
        xy = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        return planar_points(xy, t)
    raise click.ClickException(f"{path}: need columns lon,lat or x,y")


def _read_data_csv(path):
    """Data file: point columns plus z and optional sigma_eps."""
    import csv

    points = _read_points_csv(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    z = np.array([float(r["z"]) for r in rows])
    se = np.array([float(r.get("sigma_eps", 0.0) or 0.0) for r in rows])
    return Dataset(points=points, z=z, sigma_eps=se)


def _cov_from_options(kind, sigma2, tau_s, tau_t, bin_width) -> CovarianceFunction:
    if kind == "exponential":
        return exponential(sigma2, tau_s)
    if kind == "separable_exp":
        return separable_exp(sigma2, tau_s, tau_t)
    if kind == "binned_indicator":
        return binned_indicator(sigma2, tau_s, bin_width)
    raise click.ClickException(f"unknown covariance kind: {kind}")


@click.group()
@click.version_option(version=__version__)
def main():
    """Spatio-temporal gap filling toolkit."""


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--points", "points_path", type=click.Path(exists=True), required=True)
@click.option("--kind", default="exponential", show_default=True)
@click.option("--sigma2", type=float, default=1.0, show_default=True)
@click.option("--tau-s", type=float, default=0.15, show_default=True)
@click.option("--tau-t", type=float, default=1.0, show_default=True)
@click.option("--bin-width", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default="-", show_default=True)
def simulate(config, points_path, kind, sigma2, tau_s, tau_t, bin_width, seed, out):
    """Draw an unconditional Gaussian field sample at given points."""
    cfg = _load_config(config)
    kind = cfg.get("kind", kind)
    sigma2 = cfg.get("sigma2", sigma2)
    tau_s = cfg.get("tau_s", tau_s)
    tau_t = cfg.get("tau_t", tau_t)
    bin_width = cfg.get("bin_width", bin_width)
    seed = cfg.get("seed", seed)
    cov = _cov_from_options(kind, sigma2, tau_s, tau_t, bin_width)
    points = _read_points_csv(points_path)
    sample = simulate_unconditional(cov, points, seed=seed)
    lines = ["value"] + [repr(v) for v in sample.values]
    text = "\n".join(lines) + "\n"
    if out == "-":
        click.echo(text, nl=False)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--points", "points_path", type=click.Path(exists=True), required=True)
@click.option("--kind", default="exponential", show_default=True)
@click.option("--sigma2", type=float, default=1.0, show_default=True)
@click.option("--tau-s", type=float, default=0.15, show_default=True)
@click.option("--tau-t", type=float, default=1.0, show_default=True)
@click.option("--bin-width", type=float, default=1.0, show_default=True)
@click.option(
    "--space",
    type=click.Choice(["process", "observation"]),
    default="process",
    show_default=True,
)
@click.option("--out", type=click.Path(), default="-", show_default=True)
def krige(
    config, data_path, points_path, kind, sigma2, tau_s, tau_t, bin_width, space, out
):
    """Simple kriging from a data CSV onto a prediction-points CSV."""
    cfg = _load_config(config)
    kind = cfg.get("kind", kind)
    cov = _cov_from_options(
        kind,
        cfg.get("sigma2", sigma2),
        cfg.get("tau_s", tau_s),
        cfg.get("tau_t", tau_t),
        cfg.get("bin_width", bin_width),
    )
    data = _read_data_csv(data_path)
    pred_points = _read_points_csv(points_path)
    res = simple_krige(data, cov, pred_points, space=space)
    lines = ["pred,se"] + [f"{p!r},{s!r}" for p, s in zip(res.pred, res.se)]
    text = "\n".join(lines) + "\n"
    if out == "-":
        click.echo(text, nl=False)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


@main.group()
def frk():
    """Fixed Rank Kriging: fit and predict subcommands."""


@frk.command("fit")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option(
    "--mode",
    type=click.Choice(["free", "structured"]),
    default="free",
    show_default=True,
)
@click.option("--out", type=click.Path(), required=True)
def frk_fit(config, data_path, mode, out):
    """Fit an FRK model to a data CSV and save it."""
    cfg = _load_config(config)
    data = _read_data_csv(data_path)
    frame = data.points[0].loc.frame.value if data.points else "planar"
    if frame == "sphere":
        basis = build_basis_sphere_time(
            spatial_counts=tuple(cfg.get("spatial_counts", (42, 114, 240))),
            window=float(cfg.get("window", 16.0)),
            n_temporal=int(cfg.get("n_temporal", 8)),
        )
    else:
        coords = np.array([p.loc.coords for p in data.points])
        bounds = tuple(
            (float(coords[:, k].min()), float(coords[:, k].max()))
            for k in range(coords.shape[1])
        )
        counts = [tuple(c) for c in cfg.get("counts_per_res", [(4, 4), (8, 8), (16, 16)])]
        basis = build_basis_planar(bounds, counts)
    fitted = fit_em(
        data,
        basis,
        mode=cfg.get("mode", mode),
        tol=float(cfg.get("tol", 1e-6)),
        max_iter=int(cfg.get("max_iter", 200)),
    )
    save_fitted(fitted, out)
    click.echo(
        f"fitted: {basis.n_functions} basis functions, "
        f"{fitted.n_iterations} iterations, loglik {fitted.loglik_path[-1]:.3f}"
    )


@frk.command("predict")
@click.option("--model", type=click.Path(exists=True), required=True)
@click.option("--points", "points_path", type=click.Path(exists=True), required=True)
@click.option(
    "--space",
    type=click.Choice(["process", "observation"]),
    default="process",
    show_default=True,
)
@click.option("--out", type=click.Path(), default="-", show_default=True)
def frk_predict_cmd(model, points_path, space, out):
    """Predict from a saved FRK model at new points."""
    fitted = load_fitted(model)
    pred_points = _read_points_csv(points_path)
    res = frk_predict(fitted, pred_points, space=space)
    lines = ["pred,se"] + [f"{p!r},{s!r}" for p, s in zip(res.pred, res.se)]
    text = "\n".join(lines) + "\n"
    if out == "-":
        click.echo(text, nl=False)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


@main.group()
def pipeline():
    """Production gridding and gap-filling pipeline."""


@pipeline.command("run")
@click.argument("inputs", nargs=-1, type=click.Path(exists=True), required=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--policy", type=click.Choice(["v7", "v8"]), default=None)
@click.option("--se-floor", type=float, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def pipeline_run(inputs, config, seed, policy, se_floor, threads, out):
    """Run the full pipeline over retrieval CSVs, writing daily products."""
    cfg = _load_config(config)
    if policy is not None:
        cfg["policy"] = policy
    if se_floor is not None:
        cfg["se_floor"] = se_floor
    if seed is not None:
        cfg["seed"] = seed
    if threads is not None:
        cfg["threads"] = threads
    elif "threads" not in cfg and os.environ.get(THREADS_ENV):
        cfg["threads"] = int(os.environ[THREADS_ENV])
    if "spatial_counts" in cfg:
        cfg["spatial_counts"] = tuple(cfg["spatial_counts"])
    pc = PipelineConfig(**cfg)
    result = run_pipeline(list(inputs), pc, out_dir=out)
    click.echo(
        f"products: {len(result.products)} days, skipped: {len(result.skipped)} days"
    )
    for day, reason in sorted(result.skipped.items()):
        click.echo(f"  skipped day {day}: {reason}")


@main.command()
@click.option("--products", "products_dir", type=click.Path(exists=True), required=True)
@click.option("--reference", "reference_path", type=click.Path(exists=True), required=True)
@click.option("--stations", "stations_path", type=click.Path(exists=True), required=True)
@click.option("--level", type=float, default=0.95, show_default=True)
@click.option("--exclude", default=None)
@click.option("--out", type=click.Path(), default="-", show_default=True)
def validate(products_dir, reference_path, stations_path, level, exclude, out):
    """Score daily products against colocated reference measurements.

    The reference CSV needs columns station,lon,lat,time_utc,xco2,xco2_se;
    the stations file is JSON or YAML mapping station id to mean local
    overpass crossing time in hours.
    """
    import csv
    import glob as globmod

    from .pipeline import Level3Product, parse_time_utc

    products = {}
    for path in sorted(globmod.glob(os.path.join(products_dir, "product_day*.csv"))):
        day = int(os.path.basename(path)[len("product_day") : -len(".csv")])
        arr = np.genfromtxt(path, delimiter=",", names=True)
        arr = np.atleast_1d(arr)
        products[day] = Level3Product(
            target_day=day,
            lon_centers=arr["lon_center"],
            lat_centers=arr["lat_center"],
            pred=arr["pred_ppm"],
            se=arr["se_ppm"],
            n_obs_cell=arr["n_obs_cell"],
            lat_bounds=(float(arr["lat_center"].min()), float(arr["lat_center"].max())),
            window=(day - 7, day + 8),
            fit_metadata={},
            n_cells_window=0,
            n_cells_target=0,
            seed=0,
        )
    if not products:
        raise click.ClickException(f"no product CSVs under {products_dir}")

    with open(reference_path, "r", encoding="utf-8", newline="") as fh:
        refs = [
            ReferenceRecord(
                station=r["station"],
                lon=float(r["lon"]),
                lat=float(r["lat"]),
                time=parse_time_utc(r["time_utc"]),
                xco2=float(r["xco2"]),
                xco2_se=float(r["xco2_se"]),
            )
            for r in csv.DictReader(fh)
        ]
    with open(stations_path, "r", encoding="utf-8") as fh:
        crossing = yaml.safe_load(fh)
    colocated = reference_colocate(refs, crossing)
    rows = validate_products(products, colocated, level=level, exclude=exclude)
    text = validation_report(rows)
    if out == "-":
        click.echo(text, nl=False)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


if __name__ == "__main__":
    main()
