"""``gatefam`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 validation error, 3 convergence failure,
4 missing or mismatched artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import artifacts as art
from .calibration import default_sequence, evaluate_distorted, exact_last_layer_correction, sample_transfer, \
    transfer_learn
from .config import STAGE_SECTIONS, ConfigError, config_hash, load_config, stage_seed
from .network import InterpolatorNetwork, PretrainDataset, PretrainOptions, TrainingConfig, evaluate, \
    epochs_to_threshold, pretrain, train
from .quantum import gate_family, make_system
from .report import format_speedup, speedup
from .solver import SmoothPulseProblem, SolverOptions, solve_mintime, synthesize_references

log = logging.getLogger("gatefam")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_MISSING = 0, 2, 3, 4
WEIGHT_SECTIONS = ("family", "T", "dt", "system", "network")


class ConvergenceFailure(RuntimeError):
    pass


def _system(cfg):
    s = cfg["system"]
    return make_system(s["qubits"], s["amplitude_bound"], s["acceleration_bound"])


def _solver_options(cfg, stage: str) -> SolverOptions:
    s = cfg["solver"]
    return SolverOptions(max_outer=s["max_outer"], max_inner=s["max_inner"], kkt_tol=s["kkt_tol"],
                         jitter=s["jitter"], time_limit=s["time_limit"], seed=stage_seed(cfg["seed"], stage))


def _out(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prov(cfg, stage, sections=None):
    return art.provenance(config_hash(cfg, sections), cfg["seed"], stage)


def _test_params(cfg, family):
    ev = cfg["evaluation"]
    rng = np.random.default_rng(stage_seed(cfg["seed"], "evaluation"))
    if family.param_count == 1:
        return rng.uniform(family.lower(), family.upper(), size=(ev["n_random"], 1))
    axes = [np.linspace(lo, hi, ev["grid"]) for lo, hi in zip(family.lower(), family.upper())]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, family.param_count)


def _load_weights(path, cfg) -> InterpolatorNetwork:
    doc = art.read_json(path, "weights")
    art.check_provenance(doc, config_hash(cfg, WEIGHT_SECTIONS), path)
    return InterpolatorNetwork.from_dict(doc["payload"])


def _save_weights(path, net, cfg, stage):
    art.write_json(path, "weights", net.to_dict(), _prov(cfg, stage, WEIGHT_SECTIONS))


# -- stages -------------------------------------------------------------------


def cmd_synthesize(cfg) -> Path:
    fam, sys_ = gate_family(cfg["family"]), _system(cfg)
    if fam.param_count == 0:
        raise ConfigError("family: synthesize needs a parameterized family")
    s = cfg["solver"]
    out = _out(cfg)
    rs = synthesize_references(fam, sys_, cfg["grid"], cfg["T"], cfg["dt"], s["reg_weight"], s["edge_mode"],
                               s["edge_weight"], s["offset_weight"], s["fidelity_tol"],
                               _solver_options(cfg, "synthesize"), init=s["init"])
    res = rs.result
    prov = _prov(cfg, "synthesize", STAGE_SECTIONS["pulses"])
    files = []
    for n, tr in enumerate(res.trajectories):
        name = f"pulses/pulse_{n:04d}.csv"
        art.atomic_write(out / name, art.pulse_csv(tr, sys_.channel_names))
        files.append(name)
    index = {"family": fam.name, "params": [p.tolist() for p in rs.params], "edges": rs.edges, "files": files,
             "fidelities": res.fidelities, "status": res.status, "kkt": res.kkt_residual, "edge_mode": s["edge_mode"]}
    art.write_json(out / "pulses" / "index.json", "pulses", index, prov)
    art.write_json(out / "synthesis_trace.json", "diagnostics", {"trace": res.trace}, prov)
    if res.status == "nonconverged":
        art.write_json(out / "diagnostics.json", "diagnostics",
                       {"stage": "synthesize", "status": res.status, "kkt": res.kkt_residual,
                        "max_infidelity": float(np.max(1 - res.fidelities))}, prov)
        raise ConvergenceFailure(f"direct-sum solve did not converge (kkt {res.kkt_residual:.2e})")
    return out / "pulses" / "index.json"


def load_dataset(path, cfg) -> PretrainDataset:
    path = Path(path)
    doc = art.read_json(path, "pulses")
    art.check_provenance(doc, config_hash(cfg, STAGE_SECTIONS["pulses"]), path)
    idx = doc["payload"]
    accels = np.stack([art.read_pulse_csv(path.parent.parent / f)[3] for f in idx["files"]])
    return PretrainDataset(np.array(idx["params"]), accels, cfg["dt"], _system(cfg))


def cmd_pretrain(cfg, dataset=None) -> Path:
    out = _out(cfg)
    data = load_dataset(dataset or out / "pulses" / "index.json", cfg)
    fam, sys_ = gate_family(cfg["family"]), _system(cfg)
    net = InterpolatorNetwork.for_family(fam, sys_, cfg["T"], seed=stage_seed(cfg["seed"], "network"),
                                         hidden=cfg["network"]["hidden"],
                                         readout_gain=cfg["network"]["readout_gain"])
    p = cfg["pretrain"]
    net, trace = pretrain(net, data, PretrainOptions(p["learning_rate"], p["max_iters"], p["mse_tol"],
                                                     seed=stage_seed(cfg["seed"], "pretrain")))
    _save_weights(out / "pretrained.json", net, cfg, "pretrain")
    art.write_json(out / "pretrain_history.json", "history", {"mse": trace}, _prov(cfg, "pretrain"))
    return out / "pretrained.json"


def cmd_train(cfg, weights=None) -> Path:
    out = _out(cfg)
    fam, sys_ = gate_family(cfg["family"]), _system(cfg)
    if weights is not None:
        net, init = _load_weights(weights, cfg), "pretrained"
    else:
        net = InterpolatorNetwork.for_family(fam, sys_, cfg["T"], seed=stage_seed(cfg["seed"], "network"),
                                             hidden=cfg["network"]["hidden"],
                                             readout_gain=cfg["network"]["readout_gain"])
        init = "default"
    t = cfg["training"]
    tc = TrainingConfig(t["epoch_samples"], t["batch_size"], t["l1_weight"], t["learning_rate"], t["max_epochs"],
                        t["threshold_fidelity"], stage_seed(cfg["seed"], "train"))
    net, hist = train(net, fam, sys_, cfg["dt"], tc, _test_params(cfg, fam))
    _save_weights(out / "trained.json", net, cfg, "train")
    payload = hist.to_dict()
    payload.update(initialization=init, epochs_to_threshold=epochs_to_threshold(hist, t["threshold_fidelity"])
                   if len(hist) else None)
    art.write_json(out / "history.json", "history", payload, _prov(cfg, "train"))
    return out / "trained.json"


def cmd_evaluate(cfg, weights=None) -> Path:
    out = _out(cfg)
    net = _load_weights(weights or out / "trained.json", cfg)
    fam, sys_ = gate_family(cfg["family"]), _system(cfg)
    params = _test_params(cfg, fam)
    mean, std, inf = evaluate(net, fam, sys_, cfg["dt"], params)
    art.atomic_write(out / "heatmap.csv", art.heatmap_csv(params, inf))
    summary = {"mean_infidelity": mean, "std_infidelity": std, "median_infidelity": float(np.median(inf)),
               "max_infidelity": float(np.max(inf)), "points": len(params), "csv": "heatmap.csv"}
    art.write_json(out / "evaluation.json", "heatmap", summary, _prov(cfg, "evaluate"))
    return out / "evaluation.json"


def cmd_calibrate(cfg, weights=None) -> Path:
    out = _out(cfg)
    net = _load_weights(weights or out / "trained.json", cfg)
    fam, sys_ = gate_family(cfg["family"]), _system(cfg)
    c = cfg["calibration"]
    Tm = sample_transfer(sys_.n_channels, c["sigma"], stage_seed(cfg["seed"], "transfer"))
    params = _test_params(cfg, fam)
    calibrated, run = transfer_learn(net, Tm, fam, sys_, cfg["dt"], default_sequence(fam, c["n_points"]),
                                     c["grad_threshold"], c["learning_rate"], c["max_iters"], params)
    exact = exact_last_layer_correction(net, Tm)
    payload = run.to_dict()
    payload.update(transfer_matrix=Tm.M, sigma=c["sigma"], undistorted_infidelity=evaluate(
        net, fam, sys_, cfg["dt"], params)[0], exact_correction_infidelity=evaluate_distorted(
        exact, Tm, fam, sys_, cfg["dt"], params)[0])
    _save_weights(out / "calibrated.json", calibrated, cfg, "calibrate")
    art.write_json(out / "calibration.json", "calibration", payload, _prov(cfg, "calibrate"))
    return out / "calibration.json"


def _mintime_target(name, theta):
    if name == "ADAPT12":
        return gate_family(name)([theta])
    return gate_family(name)()


def cmd_mintime(cfg) -> list:
    out = _out(cfg)
    m, s = cfg["mintime"], cfg["system"]
    prov = _prov(cfg, "mintime", STAGE_SECTIONS["mintime"])
    paths, failed = [], []
    for name in m["targets"]:
        fam = gate_family(name)
        sys_ = make_system(fam.qubits, s["amplitude_bound"], s["acceleration_bound"])
        opts = _solver_options(cfg, f"mintime/{name}")
        opts.max_duration = m["max_duration"]
        p = SmoothPulseProblem(sys_, _mintime_target(name, m["theta"]), m["T"], m["dt_init"],
                               cfg["solver"]["reg_weight"], mintime=True, fidelity_constraint=m["fidelity"])
        res = solve_mintime(p, None, opts)
        tr = res.trajectory
        payload = {"target": name, "duration": res.duration, "dt": float(tr.dt[0]), "T": tr.T,
                   "fidelity": float(res.fidelities[0]), "status": res.status, "kkt": res.kkt_residual,
                   "wall_time": res.wall_time}
        if name == "ADAPT12":
            payload["theta"] = m["theta"]
        art.write_json(out / f"mintime_{name}.json", "mintime", payload, prov)
        art.atomic_write(out / f"mintime_{name}.csv", art.pulse_csv(tr, sys_.channel_names))
        paths.append(out / f"mintime_{name}.json")
        if res.status == "nonconverged":
            failed.append(name)
    if failed:
        raise ConvergenceFailure(f"minimum-time solve not converged for {', '.join(failed)}")
    return paths


def cmd_report(cfg) -> Path:
    out = _out(cfg)
    h = config_hash(cfg, STAGE_SECTIONS["mintime"])
    dur = {}
    for name in ("CNOT", "RX90"):
        path = out / f"mintime_{name}.json"
        doc = art.read_json(path, "mintime")
        art.check_provenance(doc, h, path)
        dur[name] = doc["payload"]["duration"]
    direct = cfg["report"]["direct_duration"]
    if direct is None:
        direct = cfg["T"] * cfg["dt"]
    rep = speedup(dur["CNOT"], dur["RX90"], direct)
    art.write_json(out / "report.json", "report", rep, _prov(cfg, "report"))
    art.atomic_write(out / "report.txt", format_speedup(rep))
    return out / "report.json"


# -- entry point --------------------------------------------------------------

COMMANDS = ("synthesize", "pretrain", "train", "evaluate", "calibrate", "mintime", "report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gatefam", description="Gate-family pulse synthesis and interpolation.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="experiment config (JSON)")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--seed", type=int, help="master seed (overrides seed)")
    ap.add_argument("--weights", help="weights artifact for train, evaluate or calibrate")
    ap.add_argument("--dataset", help="pulse index for pretrain (default <out>/pulses/index.json)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _thread_limit():
    n = os.environ.get("GATEFAM_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg["output_dir"] = args.out
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg["seed"] = args.seed
        with _thread_limit():
            if args.command == "synthesize":
                res = cmd_synthesize(cfg)
            elif args.command == "pretrain":
                res = cmd_pretrain(cfg, args.dataset)
            elif args.command == "train":
                res = cmd_train(cfg, args.weights)
            elif args.command == "evaluate":
                res = cmd_evaluate(cfg, args.weights)
            elif args.command == "calibrate":
                res = cmd_calibrate(cfg, args.weights)
            elif args.command == "mintime":
                res = cmd_mintime(cfg)
            else:
                res = cmd_report(cfg)
    except ConfigError as exc:
        print(f"gatefam: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceFailure as exc:
        print(f"gatefam: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (FileNotFoundError, art.ArtifactError) as exc:
        print(f"gatefam: {exc}", file=sys.stderr)
        return EXIT_MISSING
    print(res if not isinstance(res, list) else "\n".join(map(str, res)))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
