"""Batch orchestration: fit a range of mixture sizes, select models, persist artifacts.

Fits for different G are independent, so they run on a process pool; every
task derives its randomness from (global seed, G), which makes the result
JSON byte-identical regardless of worker count or completion order.

Output layout under --out:
    results.json          manifest echo, per-G summaries, selection tables
    factors.csv           per-sample normalization factors
    criteria.csv          one row per G with all information criteria
    assignments_G{g}.csv  MAP label and responsibilities per gene
    trace_G{g}.csv        log-likelihood trace with chain diagnostics
    chains_G{g}.csv       (--dump-chains) final-iteration chains, first genes
"""

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data_io
from .em_engine import FitConfig, fit_single_g
from .sampler import SamplerConfig, hmc_latent_draws
from .selection_eval import adjusted_rand_index, information_criteria, map_consistency_check, select_best
from .sim_gen import SimSpec, simulate, three_group_benchmark, two_group_benchmark

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ALL_FAILED = 2
EXIT_NONE_CONVERGED = 3

_CRITERIA = ("aic", "bic", "aic3", "icl")
_DUMP_CHAIN_OBS = 5


@dataclass(frozen=True)
class RunManifest:
    input: str
    normalization: str = "libsize"
    delimiter: str = ","
    g_min: int = 1
    g_max: int = 3
    fit_template: FitConfig = None
    out_dir: str = "."
    workers: int = 1
    seed: int = 0
    dump_chains: bool = False

    def __post_init__(self):
        if not (1 <= self.g_min <= self.g_max):
            raise ValueError("need 1 <= g_min <= g_max")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def echo(self):
        """Manifest fields embedded in results.json.

        Execution-only knobs (worker count, output directory) are excluded
        so results are comparable across environments.
        """
        tpl = self.fit_template
        return {
            "input": self.input,
            "normalization": self.normalization,
            "delimiter": self.delimiter,
            "g_min": self.g_min,
            "g_max": self.g_max,
            "seed": self.seed,
            "init_method": tpl.init_method,
            "init_runs": tpl.init_runs,
            "init_iters": tpl.init_iters,
            "init_sampler_iters": tpl.init_sampler_iters,
            "max_em_iters": tpl.max_em_iters,
            "min_em_iters": tpl.min_em_iters,
            "hw_alpha": tpl.hw_alpha,
            "chains": tpl.sampler.chains,
            "total_iters": tpl.sampler.total_iters,
            "warmup_fraction": tpl.sampler.warmup_fraction,
            "leapfrog_steps": tpl.sampler.leapfrog_steps,
            "target_accept": tpl.sampler.target_accept,
        }


def _derive_seed(base, *idx):
    return int(np.random.SeedSequence((int(base), *[int(i) for i in idx])).generate_state(1)[0])


def _fit_task(counts, s, manifest, g):
    """Fit one G; exceptions become flagged error payloads, never crashes."""
    cfg_dict = {
        k: getattr(manifest.fit_template, k)
        for k in ("init_method", "init_runs", "init_iters", "max_em_iters",
                  "min_em_iters", "hw_alpha", "sampler", "init_sampler_iters")
    }
    cfg = FitConfig(g=g, seed=_derive_seed(manifest.seed, g), **cfg_dict)
    try:
        fit = fit_single_g(counts, s, cfg)
        fit.criteria = information_criteria(
            fit.loglik_trace[-1] if fit.loglik_trace else float("nan"),
            g, counts.d, counts.n, fit.resp,
        ) if fit.loglik_trace else None
        return g, fit, None
    except Exception as exc:  # crash isolation across sibling fits
        return g, None, f"{type(exc).__name__}: {exc}"


def _write_assignments(path, counts, fit):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        g = fit.resp.g
        writer.writerow(["gene_id", "map_label", *[f"z_{c}" for c in range(g)]])
        for i, gene in enumerate(counts.row_ids):
            writer.writerow([gene, int(fit.resp.map_labels[i]),
                             *[repr(float(v)) for v in fit.resp.z[i]]])


def _write_trace(path, fit):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loglik", "rhat_max", "neff_min", "hw_pass"])
        for entry in fit.diagnostics_log:
            hw = "" if not entry["hw_tested"] else int(bool(entry["hw_pass"]))
            writer.writerow([entry["iter"], repr(entry["loglik"]),
                             repr(entry["rhat_max"]), repr(entry["neff_min"]), hw])


def _write_criteria(path, fits_by_g):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["G", "run", "loglik", "K", "AIC", "BIC", "AIC3", "ICL",
                         "effective_map_clusters", "converged"])
        for g in sorted(fits_by_g):
            fit, err = fits_by_g[g]
            if fit is None or fit.criteria is None:
                writer.writerow([g, "", "", "", "", "", "", "", "", ""])
                continue
            c = fit.criteria
            writer.writerow([
                g, fit.init_run, repr(fit.loglik_trace[-1]), c.k_free,
                repr(c.aic), repr(c.bic), repr(c.aic3), repr(c.icl),
                fit.effective_map_clusters, int(fit.converged),
            ])


def _dump_chains(path, counts, s, fit, manifest, g):
    """Debug view: chains of the final EM iteration for the first few genes."""
    cfg = FitConfig(g=g, seed=_derive_seed(manifest.seed, g),
                    sampler=manifest.fit_template.sampler)
    n_obs = min(_DUMP_CHAIN_OBS, counts.n)
    Y = counts.values[:n_obs].astype(float)
    em_iter = max(fit.em_iters_used, 1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["obs", "comp", "chain", "iter", "dim", "value"])
        for comp_idx, comp in enumerate(fit.params.components):
            ents = [(cfg.seed, 0, em_iter, i, comp_idx, 0) for i in range(n_obs)]
            batch = hmc_latent_draws(Y, s.log_s, comp, cfg.sampler, ents)
            m, kept, _, d = batch.draws.shape
            for i in range(n_obs):
                for c in range(m):
                    for t in range(kept):
                        for j in range(d):
                            writer.writerow([i, comp_idx, c, t, j,
                                             repr(float(batch.draws[c, t, i, j]))])


def run(manifest):
    """Load, normalize, fit every G in range, select, and persist. Returns exit status."""
    from pathlib import Path

    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        counts = data_io.load_counts(manifest.input, delimiter=manifest.delimiter)
        s = data_io.normalization_factors(counts, manifest.normalization)
    except (data_io.DataFormatError, ValueError, OSError) as exc:
        report = {"schema_version": SCHEMA_VERSION, "error": str(exc), "exit_code": EXIT_USAGE}
        (out / "error.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    g_values = list(range(manifest.g_min, manifest.g_max + 1))
    fits_by_g = {}
    if manifest.workers > 1 and len(g_values) > 1:
        with ProcessPoolExecutor(max_workers=min(manifest.workers, len(g_values))) as pool:
            futures = [pool.submit(_fit_task, counts, s, manifest, g) for g in g_values]
            for fut in futures:
                g, fit, err = fut.result()
                fits_by_g[g] = (fit, err)
    else:
        for g in g_values:
            g, fit, err = _fit_task(counts, s, manifest, g)
            fits_by_g[g] = (fit, err)

    outputs = ["results.json", "factors.csv", "criteria.csv"]
    data_io.write_factors(s, counts.col_ids, out / "factors.csv")
    for g in sorted(fits_by_g):
        fit, err = fits_by_g[g]
        if fit is None:
            continue
        _write_assignments(out / f"assignments_G{g}.csv", counts, fit)
        _write_trace(out / f"trace_G{g}.csv", fit)
        outputs.extend([f"assignments_G{g}.csv", f"trace_G{g}.csv"])
        if manifest.dump_chains:
            _dump_chains(out / f"chains_G{g}.csv", counts, s, fit, manifest, g)
            outputs.append(f"chains_G{g}.csv")
    _write_criteria(out / "criteria.csv", fits_by_g)

    usable = [fit for fit, err in (fits_by_g[g] for g in sorted(fits_by_g))
              if fit is not None and fit.criteria is not None]
    selection = {}
    ranked = {}
    if usable:
        for crit in _CRITERIA:
            g_star, table = select_best(usable, crit)
            selection[crit] = g_star
            ranked[crit] = [{"g": row["g"], "value": row["value"]} for row in table]

    fit_summaries = []
    for g in sorted(fits_by_g):
        fit, err = fits_by_g[g]
        if fit is None:
            fit_summaries.append({"g": g, "error": err})
            continue
        effective, map_ok = map_consistency_check(fit.resp, g)
        last_diag = fit.diagnostics_log[-1] if fit.diagnostics_log else {}
        summary = {
            "g": g,
            "converged": fit.converged,
            "em_iters_used": fit.em_iters_used,
            "loglik": fit.loglik_trace[-1] if fit.loglik_trace else None,
            "k_free": fit.k_free,
            "criteria": None,
            "weights": [float(w) for w in fit.params.weights],
            "effective_map_clusters": effective,
            "map_ok": map_ok,
            "flags": list(fit.flags),
            "init_run": fit.init_run,
            "rhat_max_final": last_diag.get("rhat_max"),
            "neff_min_final": last_diag.get("neff_min"),
        }
        if fit.criteria is not None:
            c = fit.criteria
            summary["criteria"] = {"aic": c.aic, "bic": c.bic, "aic3": c.aic3,
                                   "icl": c.icl, "icl_strict": c.icl_strict}
        fit_summaries.append(summary)

    results = {
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest.echo(),
        "normalization": {
            "method": s.method,
            "factors": {cid: float(v) for cid, v in zip(counts.col_ids, s.s)},
            "warnings": list(s.warnings),
        },
        "n_observations": counts.n,
        "n_samples": counts.d,
        "fits": fit_summaries,
        "selection": selection,
        "ranked": ranked,
        "outputs": sorted(outputs),
    }
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")

    if not usable:
        report = {"schema_version": SCHEMA_VERSION,
                  "error": "all fits failed",
                  "details": {str(g): fits_by_g[g][1] for g in sorted(fits_by_g)},
                  "exit_code": EXIT_ALL_FAILED}
        (out / "error.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return EXIT_ALL_FAILED
    if not any(fit.converged for fit, err in fits_by_g.values() if fit is not None):
        report = {"schema_version": SCHEMA_VERSION,
                  "error": "no mixture size converged",
                  "exit_code": EXIT_NONE_CONVERGED}
        (out / "error.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return EXIT_NONE_CONVERGED
    return EXIT_OK


def _parse_delimiter(text):
    if text in ("tab", "\\t", "\t"):
        return "\t"
    if len(text) != 1:
        raise argparse.ArgumentTypeError("delimiter must be a single character or 'tab'")
    return text


def _add_fit_parser(sub):
    p = sub.add_parser("fit", help="cluster a count matrix over a range of G")
    p.add_argument("--input", required=True, help="delimited count matrix")
    p.add_argument("--delimiter", type=_parse_delimiter, default=",")
    p.add_argument("--normalization", choices=["none", "libsize", "tmm"], default="libsize")
    p.add_argument("--g-min", type=int, default=1)
    p.add_argument("--g-max", type=int, default=3)
    p.add_argument("--init", choices=["kmeans", "random"], default="kmeans")
    p.add_argument("--init-runs", type=int, default=3)
    p.add_argument("--init-iters", type=int, default=10)
    p.add_argument("--init-sampler-iters", type=int, default=500)
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--total-iters", type=int, default=1000)
    p.add_argument("--max-em-iters", type=int, default=200)
    p.add_argument("--min-em-iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-chains", action="store_true",
                   help=f"debug: dump final-iteration chains for the first {_DUMP_CHAIN_OBS} genes")
    return p


def _cmd_fit(args):
    sampler = SamplerConfig(chains=args.chains, total_iters=args.total_iters)
    template = FitConfig(
        g=1, init_method=args.init, init_runs=args.init_runs, init_iters=args.init_iters,
        max_em_iters=args.max_em_iters, min_em_iters=args.min_em_iters,
        sampler=sampler, seed=args.seed, init_sampler_iters=args.init_sampler_iters,
    )
    manifest = RunManifest(
        input=args.input, normalization=args.normalization, delimiter=args.delimiter,
        g_min=args.g_min, g_max=args.g_max, fit_template=template,
        out_dir=args.out, workers=args.workers, seed=args.seed,
        dump_chains=args.dump_chains,
    )
    return run(manifest)


def _cmd_simulate(args):
    from pathlib import Path

    if args.spec:
        spec = SimSpec.from_json(args.spec)
    elif args.preset == "two-group":
        spec = two_group_benchmark(n=args.n, seed=args.seed)
    elif args.preset == "three-group":
        spec = three_group_benchmark(n=args.n, seed=args.seed)
    else:
        print("error: provide --spec or --preset", file=sys.stderr)
        return EXIT_USAGE
    if args.spec and args.n is not None:
        print("error: --n applies only to presets", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts, labels = simulate(spec)
    data_io.save_counts(counts, out / "counts.csv")
    with open(out / "labels.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gene_id", "component"])
        for gene, lab in zip(counts.row_ids, labels):
            writer.writerow([gene, int(lab)])
    spec.to_json(out / "spec.json")
    print(f"wrote {counts.n}x{counts.d} counts to {out}")
    return EXIT_OK


def _read_labels(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 2:
            raise data_io.DataFormatError(f"{path}: expected (id, label) columns")
        out = {}
        for rec in reader:
            if not rec:
                continue
            out[rec[0]] = rec[1]
    return out


def _cmd_evaluate(args):
    a = _read_labels(args.truth)
    b = _read_labels(args.predicted)
    if set(a) != set(b):
        print("error: label files cover different ids", file=sys.stderr)
        return EXIT_USAGE
    ids = sorted(a)
    ari = adjusted_rand_index([a[i] for i in ids], [b[i] for i in ids])
    print(repr(ari))
    return EXIT_OK


def _cmd_normalize(args):
    try:
        counts = data_io.load_counts(args.input, delimiter=args.delimiter)
        s = data_io.normalization_factors(counts, args.normalization)
    except (data_io.DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        data_io.write_factors(s, counts.col_ids, args.out)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(["sample_id", "s"])
        for cid, sj in zip(counts.col_ids, s.s):
            writer.writerow([cid, repr(float(sj))])
    for w in s.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mplnmix",
        description="Cluster multivariate count data with Poisson-log normal mixtures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_fit_parser(sub)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset with known labels")
    p_sim.add_argument("--spec", help="SimSpec JSON file")
    p_sim.add_argument("--preset", choices=["two-group", "three-group"])
    p_sim.add_argument("--n", type=int, default=None, help="observations (presets only)")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True, help="output directory")

    p_eval = sub.add_parser("evaluate", help="adjusted Rand index between two label files")
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--predicted", required=True)

    p_norm = sub.add_parser("normalize", help="emit normalization factors only")
    p_norm.add_argument("--input", required=True)
    p_norm.add_argument("--delimiter", type=_parse_delimiter, default=",")
    p_norm.add_argument("--normalization", choices=["none", "libsize", "tmm"], default="libsize")
    p_norm.add_argument("--out", default=None, help="factors CSV (default: stdout)")

    args = parser.parse_args(argv)
    if args.command == "fit":
        return _cmd_fit(args)
    if args.command == "simulate":
        if args.n is None and not args.spec:
            args.n = 1000
        return _cmd_simulate(args)
    if args.command == "evaluate":
        return _cmd_evaluate(args)
    if args.command == "normalize":
        return _cmd_normalize(args)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
