"""Config-driven experiment runs: train a defender, attack it, write tables."""
import csv
import hashlib
import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .attacks import (AttackConfig, calibrate_lrt_threshold, discrete_release, fixed_lrt_attack,
                      laplace_release, lrs, noise_release, optimal_lrt_attack,
                      train_bgp_response)
from .config import ExperimentConfig
from .data import (FixedSizeUniform, IndependentBernoulli, MembershipSampler, generate_reference_panel,
                   generate_synthetic_population, load_population_csv)
from .defense import (DefenderConfig, LrtConfig, calibrate_dp_epsilon, measured_noise_scale,
                      sample_generator_noise, train_bngp, train_lrt_best_response_defender)
from .errors import ParameterError
from .mechanisms import (DpParams, bitflip_mechanism, random_discrete_mechanism, sensitivity_frequency,
                         summary_statistics)
from .metrics import confusion_rates, roc_auc
from .oracle import exact_marginal_cel, expected_cel

METRICS_HEADER = ["run_id", "defender", "attacker", "kappa", "gamma", "auc_raw", "auc_oriented", "adv",
                  "tpr", "fpr", "utility_loss", "seed"]
WORKERS_ENV = "BNGP_WORKERS"


def _stream(seed, *tags):
    """Generator keyed by the run seed and string tags, independent of execution order."""
    return np.random.default_rng([int(seed), *(zlib.crc32(str(t).encode()) for t in tags)])


def worker_count():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ParameterError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ParameterError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_id(cfg):
    digest = hashlib.sha256(cfg.to_json().encode()).hexdigest()[:10]
    return f"{cfg['run']['name']}-{digest}"


# -- builders --------------------------------------------------------------------

def build_prior(cfg, K):
    p = cfg["prior"]
    if p["kind"] == "bernoulli":
        return IndependentBernoulli.uniform(K, p["p"])
    return FixedSizeUniform(K, p["size"])


def build_dataset(cfg):
    """(dataset, mechanism); exactly one is None depending on the dataset kind."""
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        return generate_synthetic_population(d["K"], d["m"], d["aaf_low"], d["aaf_high"], d["seed"]), None
    if d["kind"] == "csv":
        return load_population_csv(d["path"], d["reference_rows"] or None), None
    if d["kind"] == "bitflip":
        return None, bitflip_mechanism(d["flip"], d["K"])
    return None, random_discrete_mechanism(d["K"], d["n_outputs"], np.random.default_rng(d["seed"]))


def kappa_vector(cfg, kappa, m):
    """Scalar kappa, or a vector with kappa on a random fraction of attributes and 0 elsewhere."""
    frac = cfg["defender"]["kappa_active_fraction"]
    if frac >= 1:
        return kappa
    rng = np.random.default_rng(cfg["dataset"]["seed"])
    vec = np.zeros(m)
    vec[rng.choice(m, max(1, int(round(frac * m))), replace=False)] = kappa
    return vec


def defender_config(cfg, kappa, seed, m):
    d = cfg["defender"]
    return DefenderConfig(mode=d["mode"], kappa=kappa_vector(cfg, kappa, m), norm_order=d["norm_order"],
                          budget=d["budget"], penalty=d["penalty"], hidden=tuple(d["hidden"]),
                          hidden_activation=d["hidden_activation"], batch_norm=d["batch_norm"],
                          aux_dim=d["aux_dim"], rounds=d["rounds"], attacker_steps=d["attacker_steps"],
                          batch_size=d["batch_size"], learning_rate=d["learning_rate"],
                          weight_decay=d["weight_decay"], decay_rate=d["decay_rate"],
                          rounds_per_epoch=d["rounds_per_epoch"], seed=seed)


def discriminator_config(cfg, seed):
    g = cfg["discriminator"]
    return AttackConfig(gamma=cfg["run"]["gamma"], hidden=tuple(g["hidden"]),
                        hidden_activation=g["hidden_activation"], batch_norm=g["batch_norm"],
                        batch_size=g["batch_size"], learning_rate=g["learning_rate"],
                        weight_decay=g["weight_decay"], decay_rate=g["decay_rate"], seed=seed)


def attack_config(cfg, seed, hidden=None):
    a = cfg["attacker"]
    return AttackConfig(gamma=cfg["run"]["gamma"], hidden=tuple(hidden or a["hidden"]),
                        hidden_activation=a["hidden_activation"], batch_norm=a["batch_norm"],
                        steps=a["steps"], batch_size=a["batch_size"], learning_rate=a["learning_rate"],
                        weight_decay=a["weight_decay"], decay_rate=a["decay_rate"],
                        steps_per_epoch=a["steps_per_epoch"], seed=seed)


# -- defenders -------------------------------------------------------------------

def build_defenses(cfg, dataset, mech, source, kappa, seed):
    """Map defender name -> release sampler, training only what the listed kinds need."""
    kinds = cfg["defender"]["kinds"]
    if mech is not None:
        return {"none": discrete_release(mech, cfg["dataset"]["encoding"])}
    K, m = dataset.K, dataset.m
    d = cfg["defender"]
    out, bngp = {}, None
    if "bngp" in kinds or "dp-matched" in kinds:
        def_cfg = defender_config(cfg, kappa, seed, m)
        bngp = train_bngp(dataset, source.prior, def_cfg, discriminator_config(cfg, seed),
                          _stream(seed, "bngp", kappa))
    for kind in kinds:
        if kind == "none":
            out[kind] = noise_release(dataset)
        elif kind == "bngp":
            out[kind] = bngp.release(dataset)
        elif kind in ("fixed-lrt", "adaptive-lrt"):
            rng = _stream(seed, kind, kappa)
            if kind == "fixed-lrt":
                lrt = LrtConfig(tau=calibrate_lrt_threshold(dataset, source, rng,
                                                            cfg["attacker"]["calibration_trials"]))
            else:
                panel = generate_reference_panel(dataset, cfg["dataset"]["reference_panel"],
                                                  cfg["dataset"]["seed"])
                lrt = LrtConfig("adaptive", N=d["lrt_N"], reference=panel)
            res = train_lrt_best_response_defender(dataset, source.prior, defender_config(cfg, kappa, seed, m),
                                                   lrt, rng)
            out[kind] = res.release(dataset)
        elif kind == "dp":
            sens = sensitivity_frequency(m, K)
            out[kind] = laplace_release(dataset, DpParams(d["epsilon"], 0.0, sens).scale)
        elif kind == "dp-matched":
            noise = sample_generator_noise(bngp.generator, K, d["aux_dim"], source,
                                           _stream(seed, "noise", kappa), d["noise_samples"])
            target = measured_noise_scale(noise, kappa_vector(cfg, kappa, m))
            out[kind] = laplace_release(dataset, calibrate_dp_epsilon(target, m, K).scale)
        elif kind == "laplace":
            out[kind] = laplace_release(dataset, d["laplace_scale"])
    return out


# -- attackers -------------------------------------------------------------------

def attack_scores(kind, cfg, dataset, mech, source, release, B, X, seed, tag):
    """(ranking, decisions), both shaped like ``B``; higher ranking means more likely member."""
    gamma = cfg["run"]["gamma"]
    if kind == "bgp":
        att = train_bgp_response(release, source, attack_config(cfg, seed), _stream(seed, "bgp", *tag))
        P = att(X)
        return P, (P >= gamma).astype(int)
    if kind == "optimal-lrt":
        lookup = {tuple(row): i for i, row in enumerate(release.features)}
        # claim when Pr[x | out] / Pr[x | in] <= (1 - gamma) / gamma
        scores = [optimal_lrt_attack(mech, source.prior, mech.output_space[lookup[tuple(x)]],
                                     (1 - gamma) / gamma) for x in X]
        return np.array([s.ranking for s in scores]), np.array([s.decisions for s in scores])
    pbar, floor = dataset.reference_frequencies, dataset.p_floor
    if kind == "score":
        raw = ((dataset.records - pbar) @ (X - pbar).T).T
        return raw, (raw >= 0).astype(int)
    if kind == "fixed-lrt":
        tau = calibrate_lrt_threshold(dataset, source, _stream(seed, "tau", *tag),
                                      cfg["attacker"]["calibration_trials"])
        stat = np.reshape(lrs(dataset.records, X, pbar, floor), B.shape)
        return -stat, (stat <= tau).astype(int)
    # adaptive LRT: tau from the reference panel, one release at a time
    panel = generate_reference_panel(dataset, cfg["dataset"]["reference_panel"], cfg["dataset"]["seed"])
    rows = []
    for x in X:
        ref = np.atleast_1d(lrs(panel, x, pbar, floor))
        tau = float(np.sort(ref)[: cfg["attacker"]["lrt_N"]].mean())
        rows.append(fixed_lrt_attack(dataset, x, tau))
    return np.array([r.ranking for r in rows]), np.array([r.decisions for r in rows])


# -- one (seed, kappa) unit --------------------------------------------------------

def _run_unit(args):
    snapshot, seed, kappa = args
    cfg = ExperimentConfig(snapshot)
    dataset, mech = build_dataset(cfg)
    K = mech.K if mech is not None else dataset.K
    source = MembershipSampler(build_prior(cfg, K))
    results = []
    for dname, release in build_defenses(cfg, dataset, mech, source, kappa, seed).items():
        rng = _stream(seed, "eval", dname, kappa)
        B = source(rng, cfg["run"]["eval_samples"])
        X = release(B, rng)
        if dataset is not None:
            kv = kappa_vector(cfg, kappa, dataset.m)
            util = measured_noise_scale(X - summary_statistics(dataset, B), kv if np.ndim(kv) else None)
        else:
            util = float("nan")
        for aname in cfg["attacker"]["kinds"]:
            ranking, decisions = attack_scores(aname, cfg, dataset, mech, source, release, B, X, seed,
                                               (dname, kappa))
            labels = B.ravel()
            curve = roc_auc(np.asarray(ranking, dtype=float).ravel(), labels)
            tpr, fpr = confusion_rates(np.asarray(decisions).ravel(), labels)
            results.append({"defender": dname, "attacker": aname, "kappa": kappa, "seed": seed,
                            "auc_raw": curve.auc, "auc_oriented": curve.oriented_auc, "adv": tpr - fpr,
                            "tpr": tpr, "fpr": fpr, "utility_loss": util,
                            "fpr_curve": curve.fpr, "tpr_curve": curve.tpr})
    return results


# -- writers ---------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def write_metrics_csv(path, rid, gamma, results):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in results:
            w.writerow([rid, r["defender"], r["attacker"], _fmt(float(r["kappa"])), _fmt(float(gamma)),
                        *(_fmt(float(r[k])) for k in ("auc_raw", "auc_oriented", "adv", "tpr", "fpr",
                                                      "utility_loss")), r["seed"]])


def write_roc_csv(path, fpr, tpr):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for a, b in zip(fpr, tpr):
            w.writerow([repr(float(a)), repr(float(b))])


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def roc_svg(curves, title, size=320, pad=40):
    """Minimal SVG with one polyline per (label, fpr, tpr) and a chance diagonal."""
    span = size - 2 * pad

    def pt(f, t):
        return f"{pad + f * span:.2f},{pad + (1 - t) * span:.2f}"
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(curves)}">',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad + span}" x2="{pad + span}" y2="{pad}" stroke="#bbb" '
             'stroke-dasharray="4 3"/>',
             f'<text x="{size / 2}" y="{pad / 2}" text-anchor="middle" font-size="13">{title}</text>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">FPR</text>',
             f'<text x="12" y="{size / 2}" font-size="11" transform="rotate(-90 12 {size / 2})">TPR</text>']
    for i, (label, fpr, tpr) in enumerate(curves):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(pt(f, t) for f, t in zip(fpr, tpr))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad}" y="{size + 14 + 20 * i}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, rid, paths):
    """manifest.json listing every written file with its size and sha256."""
    files = [{"path": os.path.relpath(p, directory), "bytes": os.path.getsize(p), "sha256": sha256_file(p)}
             for p in sorted(paths)]
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"run_id": rid, "files": files}, fh, indent=2)
        fh.write("\n")
    return path


# -- entry points ----------------------------------------------------------------

def _map_units(units):
    n = min(worker_count(), len(units))
    if n <= 1:
        return [_run_unit(u) for u in units]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_unit, units))


def run_experiment(cfg, out_dir=None):
    """Run every (seed, kappa) unit and write the run directory; returns (run dir, metric rows)."""
    rid = run_id(cfg)
    out_dir = out_dir or os.path.join(cfg["run"]["output_dir"], rid)
    os.makedirs(out_dir, exist_ok=True)
    units = [(cfg.snapshot(), seed, float(k)) for k in cfg.kappas for seed in cfg["run"]["seeds"]]
    results = [r for chunk in _map_units(units) for r in chunk]
    written = []
    # single writer: every file is produced here, after the workers finish
    cpath = os.path.join(out_dir, "config.json")
    with open(cpath, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    written.append(cpath)
    mpath = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(mpath, rid, cfg["run"]["gamma"], results)
    written.append(mpath)
    if cfg["run"]["write_roc"]:
        roc_dir = os.path.join(out_dir, "roc")
        os.makedirs(roc_dir, exist_ok=True)
        for r in results:
            p = os.path.join(roc_dir, f"{r['defender']}_{r['attacker']}_k{r['kappa']:g}_s{r['seed']}.csv")
            write_roc_csv(p, r["fpr_curve"], r["tpr_curve"])
            written.append(p)
        for aname in cfg["attacker"]["kinds"]:
            curves = [(f"{r['defender']} k={r['kappa']:g} s={r['seed']} auc={r['auc_raw']:.3f}",
                       r["fpr_curve"], r["tpr_curve"]) for r in results if r["attacker"] == aname]
            p = os.path.join(roc_dir, f"{aname}.svg")
            with open(p, "w", encoding="utf-8") as fh:
                fh.write(roc_svg(curves, f"{aname} attacker"))
            written.append(p)
    write_manifest(out_dir, rid, written)
    rows = [{k: r[k] for k in METRICS_HEADER if k in r} for r in results]
    return out_dir, rows


def median_auc(rows, defender=None, attacker="bgp", kappa=None, key="auc_raw"):
    vals = [r[key] for r in rows if r["attacker"] == attacker
            and (defender is None or r["defender"] == defender)
            and (kappa is None or r["kappa"] == kappa)]
    return float(np.median(vals))


def _sweep_unit(args):
    snapshot, width, seed = args
    cfg = ExperimentConfig(snapshot)
    _, mech = build_dataset(cfg)
    prior = build_prior(cfg, mech.K)
    s = cfg["sweep"]
    release = discrete_release(mech, cfg["dataset"]["encoding"])
    att_cfg = AttackConfig(gamma=cfg["run"]["gamma"], hidden=(width,) * s["depth"],
                           hidden_activation=cfg["attacker"]["hidden_activation"], steps=s["steps"],
                           batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                           decay_rate=s["decay_rate"], seed=seed)
    att = train_bgp_response(release, prior, att_cfg, _stream(seed, "sweep", width))
    return width, seed, expected_cel(mech, prior, att(release.features))


def capacity_sweep(cfg, out_dir=None):
    """Exact CEL gap of trained discriminators per width; returns (run dir, summary rows)."""
    if not cfg.discrete:
        raise ParameterError("capacity sweep needs a discrete dataset (bitflip or random-discrete)")
    _, mech = build_dataset(cfg)
    exact = exact_marginal_cel(mech, build_prior(cfg, mech.K))
    rid = run_id(cfg)
    out_dir = out_dir or os.path.join(cfg["run"]["output_dir"], rid)
    os.makedirs(out_dir, exist_ok=True)
    units = [(cfg.snapshot(), w, seed) for w in cfg["sweep"]["widths"] for seed in cfg["run"]["seeds"]]
    n = min(worker_count(), len(units))
    if n <= 1:
        raw = [_sweep_unit(u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            raw = list(pool.map(_sweep_unit, units))
    summary = []
    for w in cfg["sweep"]["widths"]:
        gaps = np.array([cel - exact for ww, _, cel in raw if ww == w])
        summary.append({"width": w, "median_gap": float(np.median(gaps)), "std_gap": float(gaps.std()),
                        "n": len(gaps)})
    written = [os.path.join(out_dir, "config.json"), os.path.join(out_dir, "capacity_runs.csv"),
               os.path.join(out_dir, "capacity.csv")]
    with open(written[0], "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    with open(written[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "width", "seed", "cel", "exact_cel", "gap"])
        for width, seed, cel in raw:
            w.writerow([rid, width, seed, repr(cel), repr(exact), repr(cel - exact)])
    with open(written[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "width", "median_gap", "std_gap", "n"])
        for s in summary:
            w.writerow([rid, s["width"], repr(s["median_gap"]), repr(s["std_gap"]), s["n"]])
    write_manifest(out_dir, rid, written)
    return out_dir, summary


def gaps_non_increasing(summary):
    med = [s["median_gap"] for s in summary]
    return all(b <= a for a, b in zip(med, med[1:]))
