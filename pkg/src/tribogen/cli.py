"""Command-line entry point: ``tribogen generate|train|eval|invert|analyze``.

Every subcommand reads an optional JSON config (``--config``) whose sections
mirror the library's config objects; command-line flags override it. Logs
go to stderr as one JSON object per line, the human summary to stdout.

Exit codes: 0 success, 2 validation error, 3 runtime or numeric error,
4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, contact, dataset
from .dataset import GenerationConfig, Manifest, ScalerParams
from .inverse import InversionConfig, invert_direct, invert_latent
from .neural import NetworkSpec, TrainConfig, load_checkpoint, save_checkpoint
from .neural.io import CheckpointFormatError
from .neural.train import load_scaled, train
from .params import PARAM_NAMES, BoundsTable, GmmParams

log = logging.getLogger("tribogen")

CONFIG_SCHEMA = 1
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

SECTION_KEYS = {
    "generate": {"split_fractions", "split_seed"},
    "train": {"manifest", "model", "network", "max_train_samples"},
    "eval": {"checkpoint", "manifest", "split", "functional", "functional_samples", "max_samples"},
    "invert": {"checkpoint", "manifest", "target", "n", "strategy", "restarts"},
    "analyze": {"kind", "checkpoint", "manifest", "target", "n", "theta0", "n_list", "perturbation",
                "count", "noise", "max_m", "m", "functional_samples", "split", "max_samples"},
}
TOP_KEYS = {"schema_version", "seed", "out", "workers"} | set(SECTION_KEYS)


class ValidationError(ValueError):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        d = {"time": round(record.created, 3), "level": record.levelname.lower(),
             "logger": record.name, "message": record.getMessage()}
        if hasattr(record, "detail"):
            d["detail"] = record.detail
        return json.dumps(d, default=str)


def _setup_logging(verbose=False):
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_JsonFormatter())
    root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ValidationError(f"{where}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, d, where):
    _check_keys(d, _fields(cls), where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def load_config(path):
    """Read and shape-check a run config file (empty config when ``path`` is None)."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    _check_keys(cfg, TOP_KEYS, "config")
    if cfg.get("schema_version", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ValidationError(f"config schema_version must be {CONFIG_SCHEMA}")
    return cfg


def _section(cfg, name):
    sec = dict(cfg.get(name, {}))
    if not isinstance(cfg.get(name, {}), dict):
        raise ValidationError(f"config.{name}: expected an object")
    return sec


def _override(sec, **flags):
    for k, v in flags.items():
        if v is not None:
            sec[k] = v
    return sec


def _out_dir(args, cfg, default):
    return Path(args.out or cfg.get("out") or default)


def _load_manifest(path):
    if path is None:
        raise ValidationError("a dataset manifest is required (--manifest)")
    return Manifest.load(path)


def _manifest_scaler(manifest):
    if not manifest.scaler:
        raise ValidationError("manifest has no scaler reference; run generate first")
    return ScalerParams.load(Path(manifest.root) / manifest.scaler)


def _stamp(out, kind, digest, seed, ext):
    return out / f"{kind}-{digest[:12]}-s{seed}.{ext}"


# -- generate ------------------------------------------------------------


def cmd_generate(args, cfg):
    sec = _section(cfg, "generate")
    extra = {k: sec.pop(k) for k in list(sec) if k in SECTION_KEYS["generate"]}
    if args.seed is not None:
        sec["base_seed"] = args.seed
    elif "seed" in cfg and "base_seed" not in sec:
        sec["base_seed"] = cfg["seed"]
    _override(sec, recipe_count=args.recipes)
    gcfg = _build(GenerationConfig, sec, "generate")
    fractions = tuple(extra.get("split_fractions", (0.70, 0.15, 0.15)))
    split_seed = int(extra.get("split_seed", 42))
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ValidationError("split_fractions must be three non-negative numbers summing to 1")
    if gcfg.shard_count < 3:
        raise ValidationError("dataset must span at least 3 shards to split; lower shard_size")
    out = _out_dir(args, cfg, "dataset")
    workers = args.workers or cfg.get("workers", 1)
    t0 = time.time()
    manifest, reused = dataset.prepare_dataset(
        gcfg, out, workers, fractions, split_seed,
        progress=lambda i, n: log.info(f"shard {i + 1}/{n}"))
    path = out / "manifest.json"
    if reused:
        log.info("dataset up-to-date", extra={"detail": {"digest": gcfg.digest()}})
        print(f"up-to-date: {manifest.sample_count()} samples in {len(manifest.shards)} shards ({path})")
        return path
    elapsed = time.time() - t0
    total = manifest.sample_count()
    print(f"generated {total} samples in {len(manifest.shards)} shards "
          f"({total / max(elapsed, 1e-9):.0f} samples/s, {len(manifest.failures)} failures)")
    print(f"manifest: {path}")
    return path


# -- train ---------------------------------------------------------------


def cmd_train(args, cfg):
    sec = _section(cfg, "train")
    _override(sec, manifest=args.manifest, model=args.model)
    model = sec.pop("model", "cvae")
    if model not in ("vae", "cvae"):
        raise ValidationError("model must be 'vae' or 'cvae'")
    net = dict(sec.pop("network", {}))
    manifest_path = sec.pop("manifest", None)
    limit = sec.pop("max_train_samples", None)
    if args.seed is not None:
        sec["seed"] = args.seed
    elif "seed" in cfg and "seed" not in sec:
        sec["seed"] = cfg["seed"]
    tcfg = _build(TrainConfig, sec, "train")
    net["conditional"] = model == "cvae"
    spec = _build(NetworkSpec, net, "train.network")
    manifest = _load_manifest(manifest_path)
    scaler = _manifest_scaler(manifest)
    if manifest.sample_count("train") == 0:
        raise ValidationError("training split is empty")
    out = _out_dir(args, cfg, "runs")
    out.mkdir(parents=True, exist_ok=True)
    digest = _digest({"train": tcfg.to_dict(), "network": spec.to_dict(),
                      "data": manifest.config_digest, "limit": limit})
    train_data = load_scaled(manifest, "train", scaler, with_cond=spec.conditional)
    val_data = load_scaled(manifest, "val", scaler, with_cond=spec.conditional)
    if limit:
        train_data = train_data.subset(np.arange(min(int(limit), len(train_data))))
    ckpt_path = _stamp(out, f"{model}", digest, tcfg.seed, "ckpt")
    trace_path = _stamp(out, f"{model}-trace", digest, tcfg.seed, "csv")
    best, trace = train(spec, tcfg, train_data, val_data, scaler, trace_path=trace_path,
                        bounds=BoundsTable.from_dict(manifest.config["bounds"]))
    best.meta.update({"manifest": str(Path(manifest.root) / "manifest.json"),
                      "data_digest": manifest.config_digest, "run_digest": digest})
    save_checkpoint(best, ckpt_path)
    print(f"trained {model} for {tcfg.total_steps} steps; best val loss "
          f"{best.meta['best_val_loss']:.6g}")
    print(f"checkpoint: {ckpt_path}\ntrace: {trace_path}")
    return ckpt_path


# -- eval ----------------------------------------------------------------


def cmd_eval(args, cfg):
    sec = _section(cfg, "eval")
    _check_keys(sec, SECTION_KEYS["eval"], "eval")
    _override(sec, checkpoint=args.checkpoint, manifest=args.manifest)
    if args.functional:
        sec["functional"] = True
    if not sec.get("checkpoint"):
        raise ValidationError("eval needs a checkpoint (--checkpoint)")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    ckpt = load_checkpoint(sec["checkpoint"])
    manifest = _load_manifest(sec.get("manifest") or ckpt.meta.get("manifest"))
    scaler = _manifest_scaler(manifest)
    split = sec.get("split", "test")
    data = load_scaled(manifest, split, scaler, with_cond=True)
    if len(data) == 0:
        raise ValidationError(f"evaluation split {split!r} is empty")
    if sec.get("max_samples"):
        data = data.subset(np.arange(min(int(sec["max_samples"]), len(data))))
    out = _out_dir(args, cfg, "runs")
    out.mkdir(parents=True, exist_ok=True)
    digest = _digest({"eval": sec, "data": manifest.config_digest, "ckpt": dataset.file_digest(sec["checkpoint"])})
    csv_path = _stamp(out, "eval-samples", digest, seed, "csv")
    report, _ = analysis.eval_report(ckpt, data, scaler, seed=seed,
                                     functional=bool(sec.get("functional", False)),
                                     functional_samples=int(sec.get("functional_samples", 200)),
                                     bounds=BoundsTable.from_dict(manifest.config["bounds"]),
                                     csv_path=csv_path)
    jpath, rpath = _stamp(out, "eval", digest, seed, "json"), _stamp(out, "eval", digest, seed, "csv")
    report.to_json(jpath)
    report.to_csv(rpath)
    print(f"median parameter sMAPE {report.smape_median:.3f}% (P25 {report.smape_p25:.3f}, "
          f"P75 {report.smape_p75:.3f}, P99 {report.smape_p99:.3f}); adjusted R2 {report.adjusted_r2:.4f}; "
          f"Wasserstein {report.wasserstein:.4f}")
    if report.functional_smape_mean is not None:
        lo, hi = report.functional_ci
        print(f"functional sMAPE {report.functional_smape_mean:.3f}% (95% CI {lo:.3f}-{hi:.3f})")
    print(f"report: {jpath}")
    return jpath


# -- invert --------------------------------------------------------------


def _inversion_config(sec):
    fields = _fields(InversionConfig)
    inv = {k: sec.pop(k) for k in list(sec) if k in fields}
    _check_keys(sec, SECTION_KEYS["invert"], "invert")
    return _build(InversionConfig, inv, "invert")


def cmd_invert(args, cfg):
    sec = _section(cfg, "invert")
    _override(sec, checkpoint=args.checkpoint, manifest=args.manifest, target=args.target,
              n=args.n, strategy=args.strategy)
    if args.seed is not None:
        sec["seed"] = args.seed
    elif "seed" in cfg and "seed" not in sec:
        sec["seed"] = cfg["seed"]
    own = {k: sec.pop(k) for k in list(sec) if k in SECTION_KEYS["invert"]}
    icfg = _inversion_config(sec)
    strategy = own.get("strategy", "latent" if own.get("checkpoint") else "direct")
    if strategy not in ("latent", "direct"):
        raise ValidationError("strategy must be 'latent' or 'direct'")
    if not own.get("target"):
        raise ValidationError("invert needs a target law CSV (--target)")
    n = own.get("n")
    target = contact.FrictionLaw.from_csv(own["target"], asperity_count=int(n or 0), grid=contact.p_grid())
    restarts = int(own.get("restarts", 1))
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    scaler = ckpt = None
    bounds = BoundsTable()
    if strategy == "latent":
        if not own.get("checkpoint"):
            raise ValidationError("latent inversion needs an unconditional VAE checkpoint")
        ckpt = load_checkpoint(own["checkpoint"])
        manifest = _load_manifest(own.get("manifest") or ckpt.meta.get("manifest"))
        scaler = _manifest_scaler(manifest)
        bounds = BoundsTable.from_dict(manifest.config["bounds"])
    elif own.get("manifest"):
        manifest = _load_manifest(own["manifest"])
        scaler = _manifest_scaler(manifest)
        bounds = BoundsTable.from_dict(manifest.config["bounds"])
    out = _out_dir(args, cfg, "runs")
    out.mkdir(parents=True, exist_ok=True)
    digest = _digest({"invert": icfg.to_dict(), "own": own,
                      "target": dataset.file_digest(own["target"])})
    results = []
    for r in range(restarts):
        c = dataclasses.replace(icfg, seed=icfg.seed + r)
        if strategy == "latent":
            res = invert_latent(ckpt, target, n, c, scaler, bounds=bounds)
        else:
            res = invert_direct(target, n, bounds, c, scaler=scaler)
        log.info(f"restart {r}: functional sMAPE {res.functional_smape:.3f}%")
        results.append(res)
    best = min(results, key=lambda r: r.functional_smape)
    jpath = _stamp(out, f"invert-{strategy}", digest, icfg.seed, "json")
    tpath = _stamp(out, f"invert-{strategy}-trace", digest, icfg.seed, "csv")
    best.to_json(jpath)
    best.trace_to_csv(tpath)
    law = contact.simulate_law(GmmParams.from_vector(best.theta), best.n, None, icfg.sim_seed,
                               grid=target.p_grid)
    law.to_csv(_stamp(out, f"invert-{strategy}-law", digest, icfg.seed, "csv"))
    print(f"{strategy} inversion: best functional sMAPE {best.functional_smape:.3f}% "
          f"(N={best.n}, {len(results)} run(s), {best.wall_time:.1f}s)")
    print(f"result: {jpath}")
    return jpath


# -- analyze -------------------------------------------------------------


def _target_law(own, manifest, scaler, seed):
    if own.get("target"):
        n = own.get("n")
        law = contact.FrictionLaw.from_csv(own["target"], asperity_count=int(n or 0), grid=contact.p_grid())
        if not law.asperity_count:
            raise ValidationError("target law needs its asperity count (--n)")
        return law
    data = load_scaled(manifest, "test", scaler, with_cond=True)
    if len(data) == 0:
        raise ValidationError("test split is empty")
    i = int(np.random.default_rng(seed).integers(len(data)))
    return analysis.data_law(data, scaler, i)


def cmd_analyze(args, cfg):
    sec = _section(cfg, "analyze")
    _check_keys(sec, SECTION_KEYS["analyze"], "analyze")
    _override(sec, kind=args.kind, checkpoint=args.checkpoint, manifest=args.manifest,
              target=args.target, n=args.n)
    kind = sec.get("kind", "sensitivity")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = _out_dir(args, cfg, "runs")
    digest = _digest({"analyze": sec, "seed": seed})
    stem = lambda suffix, ext: _stamp(out, f"{kind}{suffix}", digest, seed, ext)  # noqa: E731

    if kind == "sensitivity":
        theta0 = GmmParams.from_vector(sec["theta0"]) if sec.get("theta0") else None
        out.mkdir(parents=True, exist_ok=True)
        table = analysis.sensitivity(theta0, tuple(sec.get("n_list", (100, 1500, 10000))),
                                     float(sec.get("perturbation", 0.05)), seed=seed)
        table.to_json(stem("", "json"))
        table.to_csv(stem("", "csv"))
        means = {n: float(np.nanmean(table.column(n))) for n in table.n_list}
        print("sensitivity column means (functional sMAPE %): "
              + ", ".join(f"N={n}: {v:.3f}" for n, v in means.items()))
    elif kind == "averaging":
        out.mkdir(parents=True, exist_ok=True)
        n_list = tuple(sec.get("n_list", (100, 1500, 10000)))
        table, pvalues = analysis.averaging_effect(n_list, int(sec.get("count", 50)),
                                                   float(sec.get("noise", 0.05)), seed)
        stem("", "json").write_text(json.dumps({"n_list": list(n_list), "smape": table.tolist(),
                                                "sign_test_p": pvalues}, indent=2))
        analysis._write_csv(stem("", "csv"), ["theta_index", "n", "functional_smape"],
                            [[k, n, table[k, j]] for k in range(table.shape[0])
                             for j, n in enumerate(n_list)])
        print("averaging sign test p-values: " + ", ".join(f"{k}: {v:.3g}" for k, v in pvalues.items()))
    elif kind == "correlation":
        manifest = _load_manifest(sec.get("manifest"))
        rec = dataset.load_records(manifest, sec.get("split"))
        if sec.get("max_samples"):
            rec = rec[:int(sec["max_samples"])]
        theta, cond = dataset.records_to_arrays(rec)
        out.mkdir(parents=True, exist_ok=True)
        r_tt = analysis.correlation_matrix(theta)
        r_ft = analysis.correlation_matrix(cond, theta)
        names = list(PARAM_NAMES)
        feat = [f"F{i + 1}" for i in range(cond.shape[1] - 1)] + ["N"]
        stem("", "json").write_text(json.dumps({
            "params": names, "features": feat,
            "theta_theta": [[None if np.isnan(x) else x for x in row] for row in r_tt],
            "feature_theta": [[None if np.isnan(x) else x for x in row] for row in r_ft]}))
        rows = [["theta", a, b, r_tt[i, j]] for i, a in enumerate(names) for j, b in enumerate(names)]
        rows += [["feature", a, b, r_ft[i, j]] for i, a in enumerate(feat) for j, b in enumerate(names)]
        analysis._write_csv(stem("", "csv"), ["block", "row", "column", "pearson"], rows)
        print(f"correlations over {theta.shape[0]} samples written")
    elif kind in ("heatmap", "convergence", "envelope"):
        if not sec.get("checkpoint"):
            raise ValidationError(f"{kind} analysis needs a conditional checkpoint")
        ckpt = load_checkpoint(sec["checkpoint"])
        manifest = _load_manifest(sec.get("manifest") or ckpt.meta.get("manifest"))
        scaler = _manifest_scaler(manifest)
        bounds = BoundsTable.from_dict(manifest.config["bounds"])
        out.mkdir(parents=True, exist_ok=True)
        if kind == "heatmap":
            data = load_scaled(manifest, sec.get("split", "test"), scaler, with_cond=True)
            if len(data) == 0:
                raise ValidationError("evaluation split is empty")
            k = min(int(sec.get("functional_samples", 2000)), len(data))
            idx = np.sort(np.random.default_rng(seed).choice(len(data), k, replace=False))
            rows, _ = analysis.functional_records(ckpt, data, scaler, idx, seed, bounds=bounds)
            hm = analysis.regime_heatmap([r[1:] for r in rows], n_bins=manifest.config["n_grid"])
            hm.to_json(stem("", "json"))
            hm.to_csv(stem("", "csv"))
            print(f"regime heatmap from {len(rows)} functional evaluations written")
        else:
            target = _target_law(sec, manifest, scaler, seed)
            if kind == "convergence":
                curve, values = analysis.latent_convergence(ckpt, target, scaler, int(sec.get("max_m", 20000)),
                                                            seed, bounds=bounds)
                stem("", "json").write_text(json.dumps({"curve": curve.tolist(), "values": values.tolist()}))
                analysis._write_csv(stem("", "csv"), ["m", "cumulative_smape", "smape"],
                                    [[i + 1, c, v] for i, (c, v) in enumerate(zip(curve, values))])
                print(f"cumulative functional sMAPE after {curve.size} draws: {curve[-1]:.3f}%")
            else:
                mean, std, _ = analysis.uncertainty_envelope(ckpt, target, scaler, int(sec.get("m", 100)),
                                                             seed, bounds=bounds)
                stem("", "json").write_text(json.dumps({"p": target.p_grid.tolist(), "target": target.f_values.tolist(),
                                                        "mean": mean.tolist(), "std": std.tolist()}))
                analysis._write_csv(stem("", "csv"), ["p", "target", "mean", "std"],
                                    zip(target.p_grid, target.f_values, mean, std))
                print(f"envelope: mean per-knot std {std.mean():.4g} N")
    else:
        raise ValidationError(f"unknown analysis kind {kind!r}")
    print(f"output: {stem('', 'json')}")
    return stem("", "json")


# -- entry point ---------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="tribogen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", type=Path, help="output directory")
        return sp

    g = common(sub.add_parser("generate", help="generate, split and scale a dataset"))
    g.add_argument("--recipes", type=int, help="number of Sobol recipes")
    t = common(sub.add_parser("train", help="train a VAE or CVAE"))
    t.add_argument("--model", choices=("vae", "cvae"))
    t.add_argument("--manifest", type=Path)
    e = common(sub.add_parser("eval", help="evaluate a checkpoint on a split"))
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--manifest", type=Path)
    e.add_argument("--functional", action="store_true", help="add the forward-simulated pass")
    i = common(sub.add_parser("invert", help="recover topography parameters for a law"))
    i.add_argument("--target", type=Path, help="CSV with columns P,F")
    i.add_argument("--n", type=int, help="asperity count (swept over the grid when omitted)")
    i.add_argument("--strategy", choices=("latent", "direct"))
    i.add_argument("--checkpoint", type=Path)
    i.add_argument("--manifest", type=Path)
    a = common(sub.add_parser("analyze", help="sensitivity, correlation and model analyses"))
    a.add_argument("--kind", choices=("sensitivity", "averaging", "correlation", "heatmap",
                                      "convergence", "envelope"))
    a.add_argument("--checkpoint", type=Path)
    a.add_argument("--manifest", type=Path)
    a.add_argument("--target", type=Path)
    a.add_argument("--n", type=int)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "invert": cmd_invert, "analyze": cmd_analyze}


def _exit_code(exc):
    if isinstance(exc, (dataset.ShardFormatError, CheckpointFormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ValidationError, ValueError, TypeError, KeyError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config)
        if args.workers is not None and args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        path = COMMANDS[args.command](args, cfg)
    except Exception as exc:  # every failure becomes an exit code plus error JSON
        code = _exit_code(exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command, "exit_code": code}), file=sys.stderr)
        if code == EXIT_RUNTIME:
            log.debug("traceback", exc_info=True)
        return code
    log.info("done", extra={"detail": {"output": str(path)}})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
