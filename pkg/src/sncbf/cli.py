"""Command-line surface: train, verify, simulate, export-grid.

All commands read a single JSON run configuration, echo the resolved config
(defaults filled) plus its hash into every report, and write outputs through
a temp-file rename so failures never leave partial files behind.

Exit codes: 0 success, 2 config error, 3 non-convergence, 4 I/O error,
5 invalid certificate or validity margin, 6 policy failure during rollout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import importlib.util
import json
import os
import sys
import tempfile
import time

import numpy as np

from .diffnet import NetParams, forward, load_checkpoint, save_checkpoint
from .lipcert import CertificateReport, LipschitzBudget, certify, lambda_repair
from .qpfilter import filtered_policy
from .scenario import (MarginQPController, build_cover, make_cover_spec,
                       safe_volume_fraction, solve_sop, stream_verify,
                       validity_check, h_batch)
from .systems import PolicyFailure, SystemModel, dubins_model, euler_maruyama_rollout, pendulum_model
from .training import TrainConfig, train, write_history


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGE = 3
EXIT_IO = 4
EXIT_INVALID = 5
EXIT_POLICY = 6


class ConfigError(Exception):
    pass


# Schema: section -> field -> (type, default). REQUIRED means no default.
REQUIRED = object()

_BUDGET_FIELDS = {
    "eps_bar": (float, REQUIRED),
    "L_h": (float, REQUIRED),
    "L_dh": (float, REQUIRED),
    "L_d2h": (float, REQUIRED),
    "L_x": (float, REQUIRED),
    "L_max_override": ((float, type(None)), None),
    "delta": (float, 1e-3),
    "gamma": (float, 1.0),
}
_TRAINING_FIELDS = {
    "lambda1": (float, 1.0),
    "lambda2": (float, 1.0),
    "c_l1": (float, 1e-4),
    "c_l2": (float, 1e-4),
    "c_l3": (float, 1e-4),
    "batch_size": (int, 256),
    "max_epochs": (int, 2000),
    "lr_theta": (float, 1e-3),
    "lr_lambda": (float, 1e-3),
    "lr_psi": (float, 1e-3),
    "v_weight": (float, 4.0),
    "seed": (int, 0),
    "hidden": (int, 20),
    "loss_theta_tol": (float, 1e-8),
    "v_tol": (float, 0.0),
    "checkpoint_every": (int, 0),
    "pretrain_steps": (int, 0),
    "pretrain_rho": (float, 3e-4),
    "pretrain_margin": (float, 0.05),
    "pretrain_floor_slack": (float, 1.0),
    "pretrain_u_clip": ((float, type(None)), None),
}
_SIMULATION_FIELDS = {
    "dt": (float, 0.01),
    "horizon": (float, 5.0),
    "rollouts": (int, 100),
    "seed": (int, 0),
    "u_clip": ((float, type(None)), None),
    "margin": ((float, type(None)), None),
}
_PATH_FIELDS = {
    "model_in": ((str, type(None)), None),
    "model_out": ((str, type(None)), None),
    "report_out": ((str, type(None)), None),
    "export_dir": ((str, type(None)), None),
}
_SCHEMA = {
    "system": (str, REQUIRED),
    "system_file": ((str, type(None)), None),
    "budget": (_BUDGET_FIELDS, REQUIRED),
    "training": (_TRAINING_FIELDS, {}),
    "simulation": (_SIMULATION_FIELDS, {}),
    "paths": (_PATH_FIELDS, {}),
}


def _check_section(raw: dict, fields: dict, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    out = {}
    for name, (typ, default) in fields.items():
        if name in raw:
            val = raw[name]
            if typ is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if typ is int and isinstance(val, bool):
                raise ConfigError(f"{where}.{name} must be {typ}")
            if not isinstance(val, typ):
                want = typ.__name__ if isinstance(typ, type) else "/".join(
                    t.__name__ for t in typ)
                raise ConfigError(f"{where}.{name} must be {want}")
            out[name] = val
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {where}.{name}")
        else:
            out[name] = default
    return out


def parse_run_config(path: str) -> dict:
    """Load, strictly validate, and default-fill a run configuration."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    unknown = sorted(set(raw) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = {}
    for name, (typ, default) in _SCHEMA.items():
        if isinstance(typ, dict):
            cfg[name] = _check_section(raw.get(name, {}), typ, name)
            if name not in raw and default is REQUIRED:
                raise ConfigError(f"missing required section {name!r}")
        else:
            cfg[name] = _check_section(
                {name: raw[name]} if name in raw else {}, {name: (typ, default)},
                "config")[name]
    if cfg["system"] not in ("pendulum", "dubins", "custom-file"):
        raise ConfigError("system must be one of pendulum, dubins, custom-file")
    if cfg["system"] == "custom-file" and not cfg["system_file"]:
        raise ConfigError("system_file is required when system is custom-file")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_system(cfg: dict) -> SystemModel:
    if cfg["system"] == "pendulum":
        return pendulum_model()
    if cfg["system"] == "dubins":
        return dubins_model()
    path = cfg["system_file"]
    spec = importlib.util.spec_from_file_location("sncbf_custom_system", path)
    if spec is None or spec.loader is None:
        raise ConfigError(f"cannot import system file {path}")
    mod = importlib.util.module_from_spec(spec)
    try:
        spec.loader.exec_module(mod)
    except Exception as exc:
        raise ConfigError(f"error importing system file {path}: {exc}")
    if not hasattr(mod, "build_model"):
        raise ConfigError("custom system file must define build_model()")
    model = mod.build_model()
    if not isinstance(model, SystemModel):
        raise ConfigError("build_model() must return a SystemModel")
    return model


def budget_from_config(cfg: dict) -> LipschitzBudget:
    b = cfg["budget"]
    return LipschitzBudget(L_h=b["L_h"], L_dh=b["L_dh"], L_d2h=b["L_d2h"],
                           L_x=b["L_x"], eps_bar=b["eps_bar"],
                           delta=b["delta"], L_max_override=b["L_max_override"])


def train_config_from(cfg: dict, out_dir) -> TrainConfig:
    t = dict(cfg["training"])
    return TrainConfig(budget=budget_from_config(cfg), gamma=cfg["budget"]["gamma"],
                       out_dir=out_dir, **t)


def atomic_write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=1, default=float) + "\n")


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _default_workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    env = os.environ.get("SNCBF_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _load_model_sidecar(model_path: str):
    """Checkpoint plus optional .meta.json sidecar (psi, lambda logs)."""
    params, sigma_diag = load_checkpoint(model_path)
    meta = {}
    meta_path = model_path[:-len(".json")] + ".meta.json" \
        if model_path.endswith(".json") else model_path + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    return params, sigma_diag, meta


def _lambda_logs(params: NetParams, sigma_diag, budget, meta):
    if "lambda_logs" in meta:
        return tuple(np.asarray(l, dtype=np.float64) for l in meta["lambda_logs"])
    p = params.hidden_dim
    logs = (np.zeros(p), np.zeros(p), np.zeros(p))
    logs, _ = lambda_repair(params, sigma_diag, budget, logs, iters=500)
    return logs


def cmd_train(args) -> int:
    try:
        cfg = parse_run_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = cfg["paths"]["export_dir"] or os.path.dirname(
        os.path.abspath(args.config))
    try:
        model = resolve_system(cfg)
        budget = budget_from_config(cfg)
        tcfg = train_config_from(cfg, out_dir)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    t0 = time.time()
    _, data = build_cover(model, budget.eps_bar)
    t_cover = time.time() - t0
    state, converged = train(model, data, tcfg)
    t_train = time.time() - t0 - t_cover

    model_out = cfg["paths"]["model_out"] or os.path.join(out_dir, "model.json")
    report_out = cfg["paths"]["report_out"] or os.path.join(out_dir, "train-report.json")
    history_out = os.path.join(out_dir, "history.csv")
    try:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model_out, state.params, model.sigma_diag)
        sidecar = {"psi": state.psi,
                   "lambda_logs": [l.tolist() for l in state.lambda_logs],
                   "epoch": state.epoch, "config_hash": config_hash(cfg)}
        atomic_write_json(model_out[:-len(".json")] + ".meta.json"
                          if model_out.endswith(".json")
                          else model_out + ".meta.json", sidecar)
        write_history(history_out, state.history)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    report = certify(state.params, model.sigma_diag, budget, state.lambdas())
    psi_star = state.psi_star if state.psi_star is not None else state.psi
    vc = validity_check(psi_star, budget)
    vol = safe_volume_fraction(state.params, model, seed=tcfg.seed)
    exp_report = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "converged": bool(converged),
        "valid": bool(vc["valid"]) and report.all_pass,
        "psi_star": psi_star,
        "psi": state.psi,
        "validity": vc,
        "certificates": report.to_json_dict(),
        "safe_volume": vol,
        "epochs": state.epoch + 1,
        "timings": {"cover_s": t_cover, "train_s": t_train},
        "model_path": os.path.abspath(model_out),
    }
    try:
        atomic_write_json(report_out, exp_report)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    verdict = "converged" if converged else "did not converge"
    print(f"training {verdict} after {state.epoch + 1} epoch(s); "
          f"psi* = {psi_star:.6g}, margin = {vc['margin']:.6g}")
    if not converged or not exp_report["valid"]:
        return EXIT_NO_CONVERGE
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        cfg = parse_run_config(args.config)
        model = resolve_system(cfg)
        budget = budget_from_config(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params, sigma_diag, meta = _load_model_sidecar(args.model)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"I/O error loading model: {exc}", file=sys.stderr)
        return EXIT_IO
    if params.input_dim != model.n:
        print("config error: checkpoint dimension does not match system",
              file=sys.stderr)
        return EXIT_CONFIG

    workers = _default_workers(args)
    gamma = cfg["budget"]["gamma"]
    margin = max(0.0, -float(meta.get("psi", 0.0)))
    controller = MarginQPController(gamma=gamma, margin=margin)

    t0 = time.time()
    if args.fine:
        fine = make_cover_spec(model.state_box.lo, model.state_box.hi,
                               budget.eps_bar)
        sop = stream_verify(params, model, fine, controller, budget, gamma,
                            workers=workers)
    else:
        fine, data = build_cover(model, budget.eps_bar)
        sop = solve_sop(params, model, data, controller, budget, gamma)
    t_sweep = time.time() - t0

    logs = _lambda_logs(params, sigma_diag, budget, meta)
    report = certify(params, sigma_diag, budget,
                     tuple(np.exp(l) for l in logs))
    vc = validity_check(sop.psi_star, budget)
    out = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "valid": bool(vc["valid"]) and report.all_pass,
        "validity": vc,
        "certificates": report.to_json_dict(),
        "psi_star": sop.psi_star,
        "argmax_x": list(sop.argmax_x),
        "argmax_family": sop.argmax_k,
        "family_maxima": {"q1": sop.q1_max, "q2": sop.q2_max, "q3": sop.q3_max},
        "n_infeasible": sop.n_infeasible,
        "grid_points": fine.total,
        "workers": workers,
        "timings": {"sweep_s": t_sweep},
    }
    print(f"psi* = {sop.psi_star:.6g}, margin = {vc['margin']:.6g}, "
          f"certificates {'PD' if report.all_pass else 'FAILED'}")
    report_out = cfg["paths"]["report_out"] or (args.model + ".verify.json")
    try:
        atomic_write_json(report_out, out)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not out["valid"]:
        return EXIT_INVALID
    return EXIT_OK


def _uref_fn(spec: str, model: SystemModel):
    if spec == "zero":
        return None
    table = np.loadtxt(spec, delimiter=",", ndmin=2)
    if table.shape[1] != model.n + model.m:
        raise ConfigError("u_ref table must have n state + m input columns")
    states, inputs = table[:, :model.n], table[:, model.n:]

    def fn(x):
        # nearest tabulated state
        idx = int(np.argmin(np.linalg.norm(states - x, axis=1)))
        return inputs[idx]
    return fn


def cmd_simulate(args) -> int:
    try:
        cfg = parse_run_config(args.config)
        model = resolve_system(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params, sigma_diag, meta = _load_model_sidecar(args.model)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error loading model: {exc}", file=sys.stderr)
        return EXIT_IO
    if params.input_dim != model.n:
        print("config error: checkpoint dimension does not match system",
              file=sys.stderr)
        return EXIT_CONFIG
    model = model.with_sigma(sigma_diag)

    sim = cfg["simulation"]
    rollouts = args.rollouts if args.rollouts is not None else sim["rollouts"]
    seed = args.seed if args.seed is not None else sim["seed"]
    dt, horizon = sim["dt"], sim["horizon"]
    steps = int(round(horizon / dt))
    gamma = cfg["budget"]["gamma"]
    margin = sim["margin"]
    if margin is None:
        margin = max(0.0, -float(meta.get("psi", 0.0)))
    try:
        u_ref_fn = _uref_fn(args.uref, model)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    policy = filtered_policy(params, model, u_ref_fn=u_ref_fn, gamma=gamma,
                             margin=margin, u_clip=sim["u_clip"])

    def h_fn(x):
        return forward(params, x, model.sigma_diag).value

    out_dir = cfg["paths"]["export_dir"] or os.path.dirname(
        os.path.abspath(args.model))
    os.makedirs(out_dir, exist_ok=True)

    # one seeded generator drives the start states; rollout k uses seed+k
    rng = np.random.default_rng(seed)
    lo, hi = model.state_box.lo, model.state_box.hi
    starts = []
    while len(starts) < rollouts:
        X = rng.uniform(lo, hi, size=(max(64, 4 * rollouts), model.n))
        X = X[model.in_safe(X)]
        starts.extend(X[: rollouts - len(starts)])
    starts = np.asarray(starts)

    min_h, safe_flags = [], []
    failure = None
    for k in range(rollouts):
        try:
            log = euler_maruyama_rollout(model, policy, starts[k], dt=dt,
                                         steps=steps, seed=seed + k, h_fn=h_fn)
        except PolicyFailure as exc:
            failure = {"rollout": k, "state": list(np.asarray(exc.state))}
            break
        log.to_csv(os.path.join(out_dir, f"trajectory-{k:04d}.csv"))
        min_h.append(float(np.min(log.h_values)))
        safe_flags.append(bool(np.min(log.h_values) >= 0.0))

    summary = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "rollouts": rollouts,
        "completed": len(min_h),
        "dt": dt,
        "horizon": horizon,
        "seed": seed,
        "fraction_safe": float(np.mean(safe_flags)) if safe_flags else 0.0,
        "mean_min_h": float(np.mean(min_h)) if min_h else float("nan"),
        "policy_failure": failure,
    }
    try:
        atomic_write_json(os.path.join(out_dir, "simulate-summary.json"), summary)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if failure is not None:
        print(f"policy failure in rollout {failure['rollout']} at state "
              f"{failure['state']}", file=sys.stderr)
        return EXIT_POLICY
    print(f"{rollouts} rollouts: fraction_safe = {summary['fraction_safe']:.3f}, "
          f"mean_min_h = {summary['mean_min_h']:.6g}")
    return EXIT_OK


def _parse_slice(spec: str, n: int):
    try:
        name, val = spec.split("=", 1)
        axis = int(name.lstrip("x")) - 1 if name.startswith("x") else \
            {"psi": 2}.get(name, -1)
        value = float(val)
    except (ValueError, IndexError):
        raise ConfigError(f"bad slice spec {spec!r}; expected e.g. x3=0")
    if not 0 <= axis < n:
        raise ConfigError(f"slice axis out of range for n = {n}")
    return axis, value


def cmd_export_grid(args) -> int:
    try:
        cfg = parse_run_config(args.config)
        model = resolve_system(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params, sigma_diag, meta = _load_model_sidecar(args.model)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error loading model: {exc}", file=sys.stderr)
        return EXIT_IO
    if model.n > 3 and not args.slice:
        print("config error: n > 3 requires a --slice spec", file=sys.stderr)
        return EXIT_CONFIG
    model = model.with_sigma(sigma_diag)

    sliced = None
    if args.slice:
        try:
            sliced = _parse_slice(args.slice, model.n)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    R = args.resolution
    gamma = cfg["budget"]["gamma"]
    margin = max(0.0, -float(meta.get("psi", 0.0)))
    lo, hi = model.state_box.lo, model.state_box.hi
    axes = [i for i in range(model.n) if sliced is None or i != sliced[0]]
    grids = np.meshgrid(*[np.linspace(lo[i], hi[i], R) for i in axes],
                        indexing="ij")
    X = np.zeros((grids[0].size, model.n))
    for col, gax in zip(axes, grids):
        X[:, col] = gax.ravel()
    if sliced is not None:
        X[:, sliced[0]] = sliced[1]

    from .qpfilter import FilterStatus, qp_filter
    from .scenario import eval_q

    budget = budget_from_config(cfg)
    rows = []
    for x in X:
        h = forward(params, x, model.sigma_diag).value
        res = qp_filter(params, model, x, np.zeros(model.m), gamma=gamma,
                        margin=margin)
        if res.status is FilterStatus.INFEASIBLE:
            q3 = float("inf")
        else:
            q3 = eval_q(params, model, x, res.u, budget, gamma)["q3"]
        rows.append(list(x) + [h, q3])

    out_dir = cfg["paths"]["export_dir"] or os.path.dirname(
        os.path.abspath(args.model))
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "grid-export.csv")
    header = [f"x{i+1}" for i in range(model.n)] + ["h", "q3_at_uref"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.17g}" for v in row))
    try:
        _atomic_write(out_path, "\n".join(lines) + "\n")
        vol = safe_volume_fraction(params, model)
        atomic_write_json(os.path.join(out_dir, "grid-summary.json"),
                          {"config": cfg, "config_hash": config_hash(cfg),
                           "safe_volume": vol, "rows": len(rows),
                           "resolution": R,
                           "slice": args.slice})
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(rows)} rows; safe volume fraction "
          f"{vol['fraction']:.4f} +/- {vol['ci95']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sncbf",
                                 description="Train, certify, and deploy "
                                             "stochastic neural control "
                                             "barrier functions.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a barrier from a run config")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("verify", help="sweep the fine cover and certify")
    p.add_argument("model")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--fine", action="store_true",
                   help="stream the full fine grid instead of the cached cover")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("simulate", help="seeded rollouts under the QP filter")
    p.add_argument("model")
    p.add_argument("config")
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--uref", default="zero",
                   help="'zero' or a CSV table of (state, input) rows")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("export-grid", help="dump h and q3 on a plotting grid")
    p.add_argument("model")
    p.add_argument("config")
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--slice", default=None,
                   help="fix one axis, e.g. x3=0 or psi=0")
    p.set_defaults(fn=cmd_export_grid)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
