"""Command-line experiment runner.

    qflow pretrain  --config cfg.yaml --out DIR
    qflow evolve    --config cfg.yaml --out DIR [--seed N]
    qflow reference --config cfg.yaml --out DIR
    qflow eval      --config cfg.yaml --checkpoint FILE --out DIR

Exit status: 0 on success, 2 for an invalid configuration or refused
request, 1 for a runtime abort (a FAILED marker is left in the output dir).
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Any

import numpy as np
import yaml

CSV_HEADER = (
    "step,time,l1_mean,l1_stderr,centroid_norm,centroid_norm_stderr,"
    "liouvillian_loss,liouvillian_loss_stderr,n1_mean,n1_stderr,residual,clamp_count"
)
CSV_COLUMNS = CSV_HEADER.split(",")
METRIC_NAMES = ("l1", "centroid_norm", "liouvillian_loss", "n1")

log = logging.getLogger("qflow")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": {"kind": "harmonic", "n_modes": 1, "draw": True, "param_seed": None},
    "initial": {"kind": "coherent", "center": -1.0},
    "method": "euler-kl",
    "flow": {"n_layers": 3, "hidden": 5, "s_cap": 5.0},
    "euler_kl": {
        "dt": 0.01, "T": 15.0, "epochs_per_step": 150, "batch_n": 1000, "lr": 1e-3,
        "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "clamp_eps": 1e-12,
        "baseline": True, "reset_optimizer": False, "lr_schedule": "constant", "average_tail": 0.5,
    },
    "tdvp": {"dt": 0.01, "T": 15.0, "batch_n": 1000, "shift": 0.01, "centered": False},
    "pseudo_spectral": {"grid": 256, "extent": 10.0, "rtol": 1e-8, "atol": 1e-10, "times": None},
    "pretrain": {
        "mh": {"n": 20000, "proposal_sigma": 0.5, "burn_in": 5000, "thin": 5, "n_chains": 50},
        "nll": {"epochs": 2000, "lr": 1e-3, "batch_size": 1024},
        "kl": {"epochs": 2000, "batch_n": 1024, "lr": 1e-3, "self_normalize": True},
    },
    "metrics": {"names": list(METRIC_NAMES), "cadence": 1, "times": None, "n_samples": 1000},
    "checkpoint_every": 0,
}


class ConfigError(Exception):
    pass


# -- config -----------------------------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected a mapping")
            # model and initial state are replaced whole; other sections merge per key
            out[k] = dict(v) if k in ("model", "initial") else _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | Path, seed: int | None = None) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    return resolve(cfg)


def _positive(cfg: dict, section: str, key: str, integer=False):
    v = cfg[section][key]
    if integer and (not isinstance(v, int) or isinstance(v, bool)):
        raise ConfigError(f"{section}.{key}: expected an integer, got {v!r}")
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        raise ConfigError(f"{section}.{key}: must be positive, got {v!r}")


def resolve(cfg: dict) -> dict:
    """Validate and materialize random parameter draws."""
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")
    if cfg["method"] not in ("euler-kl", "tdvp", "pseudo-spectral"):
        raise ConfigError(f"method: expected euler-kl, tdvp or pseudo-spectral, got {cfg['method']!r}")
    model = cfg["model"]
    kind = model.get("kind")
    if kind == "harmonic":
        M = model.get("n_modes")
        if not isinstance(M, int) or M < 1:
            raise ConfigError(f"model.n_modes: expected a positive integer, got {M!r}")
        if model.get("draw", "omega" not in model):
            from qflow.liouvillian import ModelSpec

            ps = model.get("param_seed")
            ps = seed if ps is None else ps
            spec = ModelSpec.draw_harmonic(M, np.random.default_rng(ps))
            model = {"kind": "harmonic", "n_modes": M, "draw": False, "param_seed": ps,
                     "omega": list(spec.omega), "gamma": list(spec.gamma), "nbar": list(spec.nbar)}
        for key in ("omega", "gamma", "nbar"):
            vals = model.get(key)
            if not isinstance(vals, list) or len(vals) != M:
                raise ConfigError(f"model.{key}: expected a list of {M} numbers")
        if any(v < 0 for v in model["gamma"] + model["nbar"]):
            raise ConfigError("model.gamma and model.nbar must be nonnegative")
    elif kind == "bosonic-chain":
        gamma = model.get("gamma")
        if not isinstance(gamma, list) or not gamma:
            raise ConfigError("model.gamma: expected a nonempty list of per-well loss rates")
        if not isinstance(model.get("J"), (int, float)):
            raise ConfigError("model.J: expected a number")
        model = {"kind": kind, "n_modes": len(gamma), "J": float(model["J"]), "gamma": [float(g) for g in gamma]}
    else:
        raise ConfigError(f"model.kind: expected harmonic or bosonic-chain, got {kind!r}")
    cfg = copy.deepcopy(cfg)
    cfg["model"] = model
    init = cfg["initial"]
    if init.get("kind") not in ("coherent", "bec", "checkpoint"):
        raise ConfigError("initial.kind: expected coherent, bec or checkpoint")
    if init["kind"] == "bec":
        if model["n_modes"] != 2:
            raise ConfigError("initial.kind bec needs a 2-mode model")
        if not isinstance(init.get("n_total"), int) or init["n_total"] < 0:
            raise ConfigError("initial.n_total: expected a nonnegative integer")
    if init["kind"] == "checkpoint" and not init.get("path"):
        raise ConfigError("initial.path: required for a checkpoint initial state")
    for key in ("dt", "T", "epochs_per_step", "batch_n", "lr", "clamp_eps"):
        _positive(cfg, "euler_kl", key, integer=key in ("epochs_per_step", "batch_n"))
    for key in ("dt", "T", "batch_n"):
        _positive(cfg, "tdvp", key, integer=key == "batch_n")
    if cfg["tdvp"]["shift"] < 0:
        raise ConfigError("tdvp.shift: must be >= 0")
    _positive(cfg, "flow", "n_layers", integer=True)
    from qflow import evolve
    from qflow.exceptions import InvalidConfigurationError

    try:
        evolve.EulerKLConfig(**cfg["euler_kl"])
        evolve.TDVPConfig(**cfg["tdvp"])
    except InvalidConfigurationError as exc:
        raise ConfigError(str(exc)) from None
    bad = set(cfg["metrics"]["names"]) - set(METRIC_NAMES)
    if bad:
        raise ConfigError(f"metrics.names: unknown metric(s) {sorted(bad)}")
    return cfg


def model_spec(cfg: dict):
    from qflow.liouvillian import ModelSpec

    m = cfg["model"]
    if m["kind"] == "harmonic":
        return ModelSpec.harmonic(m["omega"], m["gamma"], m["nbar"])
    return ModelSpec.bosonic_chain(m["J"], m["gamma"])


# -- construction helpers ------------------------------------------------------------------

def _initial_gaussian(cfg):
    from qflow.reference import GaussianMomentState

    if cfg["initial"]["kind"] != "coherent":
        return None
    return GaussianMomentState.coherent(cfg["model"]["n_modes"], cfg["initial"].get("center", -1.0))


def _initial_target(cfg):
    from qflow.pretrain import TargetDensity

    init = cfg["initial"]
    if init["kind"] == "bec":
        return TargetDensity.antisymmetric_bec(init["n_total"])
    g = _initial_gaussian(cfg)
    return TargetDensity.gaussian(g.mean, g.cov)


def initial_model(cfg):
    from qflow import flow

    init = cfg["initial"]
    fl = cfg["flow"]
    d = 2 * cfg["model"]["n_modes"]
    if init["kind"] == "checkpoint":
        model, t0 = flow.load_checkpoint(init["path"])
        if model.d != d:
            raise ConfigError(f"checkpoint dimension {model.d} does not match model dimension {d}")
        return model, t0
    if init["kind"] == "coherent":
        g = _initial_gaussian(cfg)
        prior = flow.Prior.diagonal_gaussian(g.mean, np.diag(g.cov))
    else:
        prior = flow.Prior.standard_normal(d)
    model = flow.init_identity(d, prior, fl["n_layers"], cfg["seed"], hidden=fl["hidden"], s_cap=fl["s_cap"])
    return model, 0.0


def exact_solution(cfg, t):
    """Gaussian oracle at time t, or None when the model has none."""
    from qflow.reference import gaussian_moment_solution

    g = _initial_gaussian(cfg)
    if g is None or cfg["model"]["kind"] != "harmonic":
        return None
    return gaussian_moment_solution(model_spec(cfg), g, t)


def metric_hook(cfg, op):
    from qflow import flow, metrics

    names = set(cfg["metrics"]["names"])
    n = cfg["metrics"]["n_samples"]

    def hook(model, t, rng):
        out = {}
        batch = flow.sample(model, n, rng)
        if "l1" in names:
            exact = exact_solution(cfg, t)
            if exact is not None:
                out["l1_mean"], out["l1_stderr"] = metrics.model_l1_loss(model, exact, n, rng)
        if "centroid_norm" in names:
            out["centroid_norm"], out["centroid_norm_stderr"] = metrics.centroid_norm(batch)
        if "liouvillian_loss" in names:
            out["liouvillian_loss"], out["liouvillian_loss_stderr"] = metrics.liouvillian_loss(model, op, n, rng)
        if "n1" in names:
            out["n1_mean"], out["n1_stderr"] = metrics.n1_observable(batch)
        return out

    return hook


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])


def record_rows(record) -> list[dict]:
    rows = []
    for r in record.rows:
        row = {"step": r.step, "time": r.time, "residual": r.residual, "clamp_count": r.clamp_count}
        row.update(r.metrics)
        rows.append(row)
    return rows


def _metric_schedule(cfg, dt, n_steps):
    m = cfg["metrics"]
    at = None
    if m["times"] is not None:
        at = [int(round(t / dt)) for t in m["times"]]
        if any(s < 0 or s > n_steps for s in at):
            raise ConfigError("metrics.times: every time must lie in [0, T]")
    return (m["cadence"] or None), at


def _write_resolved(cfg, out: Path) -> None:
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


# -- subcommands --------------------------------------------------------------------------

def cmd_pretrain(cfg, out: Path) -> None:
    from qflow import flow, pretrain

    model, _ = initial_model(cfg)
    target = _initial_target(cfg)
    p = cfg["pretrain"]
    rng = np.random.default_rng(cfg["seed"])
    mh = pretrain.mh_sample(target, p["mh"]["n"], rng, proposal_sigma=p["mh"]["proposal_sigma"],
                            burn_in=p["mh"]["burn_in"], thin=p["mh"]["thin"], n_chains=p["mh"]["n_chains"])
    log.info("MH acceptance %.3f, ESS %.0f", mh.acceptance_rate, mh.ess)
    model, nll = pretrain.nll_pretrain(model, mh.points, p["nll"]["epochs"], p["nll"]["lr"],
                                       batch_size=p["nll"]["batch_size"], rng=rng)
    model, ess = pretrain.kl_pretrain(model, target, p["kl"]["epochs"], p["kl"]["batch_n"], p["kl"]["lr"],
                                      rng=rng, self_normalize=p["kl"]["self_normalize"])
    kl, kl_se = pretrain.forward_kl_estimate(model, target, mh.points)
    flow.save_checkpoint(model, out / "pretrained.ckpt", time=0.0)
    with open(out / "pretrain_log.txt", "w") as fh:
        fh.write(f"mh_acceptance {mh.acceptance_rate!r}\nmh_ess {mh.ess!r}\n")
        fh.write(f"final_nll {nll[-1]!r}\nfinal_kl_ess {ess[-1]!r}\n")
        fh.write(f"forward_kl {kl!r}\nforward_kl_stderr {kl_se!r}\n")


def cmd_evolve(cfg, out: Path) -> None:
    from qflow import evolve, flow
    from qflow.liouvillian import compile_model

    if cfg["method"] == "pseudo-spectral":
        cmd_reference(cfg, out)
        return
    op = compile_model(model_spec(cfg))
    model, t0 = initial_model(cfg)
    hook = metric_hook(cfg, op)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    if cfg["method"] == "euler-kl":
        e = cfg["euler_kl"]
        ecfg = evolve.EulerKLConfig(seed=cfg["seed"], **e)
        cadence, at = _metric_schedule(cfg, ecfg.dt, ecfg.n_steps)
        model, record = evolve.euler_kl_run(model, op, ecfg, [hook], cadence=cadence, at_steps=at, t0=t0,
                                            checkpoint_dir=ckpt_dir, checkpoint_every=cfg["checkpoint_every"])
    else:
        tcfg = evolve.TDVPConfig(seed=cfg["seed"], **cfg["tdvp"])
        cadence, at = _metric_schedule(cfg, tcfg.dt, tcfg.n_steps)
        every = cfg["checkpoint_every"]

        def save(step, m):
            if every and step % every == 0:
                flow.save_checkpoint(m, ckpt_dir / f"step_{step:06d}.ckpt", time=t0 + step * tcfg.dt)

        model, record = evolve.tdvp_run(model, op, tcfg, [hook], cadence=cadence, at_steps=at, t0=t0, on_step=save)
    write_csv(out / "trajectory.csv", record_rows(record))
    flow.save_checkpoint(model, out / "final.ckpt", time=record.rows[-1].time)


def cmd_reference(cfg, out: Path) -> None:
    from qflow import metrics, reference
    from qflow.exceptions import UnsupportedError
    from qflow.liouvillian import compile_model

    M = cfg["model"]["n_modes"]
    spec = model_spec(cfg)
    rng = np.random.default_rng(cfg["seed"])
    n = cfg["metrics"]["n_samples"]
    times = cfg["metrics"]["times"] or [cfg["euler_kl"]["T"]]
    if cfg["model"]["kind"] == "bosonic-chain" and cfg["method"] != "pseudo-spectral":
        # linear second-moment oracle
        if cfg["initial"]["kind"] != "bec":
            raise ConfigError("bosonic reference needs initial.kind bec")
        C0 = reference.antisymmetric_bec_moments(cfg["initial"]["n_total"] / 2)
        rows = [{"step": k, "time": t,
                 "n1_mean": float(reference.bosonic_moment_solution(spec.J, spec.gamma, C0, t)[0, 0].real)}
                for k, t in enumerate([0.0] + list(times))]
        write_csv(out / "reference.csv", rows)
        return
    if 2 * M > 4:
        raise UnsupportedError(
            f"pseudo-spectral grids are limited to 4 dimensions; this model has {2 * M}"
        )
    ps = cfg["pseudo_spectral"]
    g = _initial_gaussian(cfg)
    if g is None:
        raise ConfigError("pseudo-spectral reference needs a coherent initial state")
    shape = (ps["grid"],) * (2 * M)
    q0 = reference.GridState.from_function(lambda x: g.density(x), shape, ps["extent"]).project()
    op = compile_model(spec)
    grids = reference.pseudospectral_solve(op, q0, list(times), rtol=ps["rtol"], atol=ps["atol"])
    rows = []
    for k, (t, grid) in enumerate(zip(times, grids)):
        grid.save(out / f"grid_t{t:g}.bin")
        row = {"step": k + 1, "time": t}
        exact = exact_solution(cfg, t)
        if exact is not None:
            row["l1_mean"], row["l1_stderr"] = metrics.l1_loss(grid.log_density, exact, n, rng)
        pts = grid.sample(rng, n)
        row["centroid_norm"], row["centroid_norm_stderr"] = metrics.centroid_norm(pts)
        row["n1_mean"], row["n1_stderr"] = metrics.n1_observable(pts)
        rows.append(row)
    write_csv(out / "reference.csv", rows)


def cmd_eval(cfg, out: Path, checkpoint: str) -> None:
    from qflow import flow
    from qflow.liouvillian import compile_model

    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, t = flow.load_checkpoint(path)
    d = 2 * cfg["model"]["n_modes"]
    if model.d != d:
        raise ConfigError(f"checkpoint dimension {model.d} does not match model dimension {d}")
    op = compile_model(model_spec(cfg))
    row = {"step": 0, "time": t}
    row.update(metric_hook(cfg, op)(model, t, np.random.default_rng(cfg["seed"])))
    write_csv(out / "eval.csv", [row])
    sys.stdout.write((out / "eval.csv").read_text())


# -- entry point ---------------------------------------------------------------------------

def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    os.environ["XLA_FLAGS"] = (
        os.environ.get("XLA_FLAGS", "")
        + f" --xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} intra_op_parallelism_threads={n}"
    ).strip()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qflow", description="Phase-space flow simulation of open quantum systems")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("pretrain", "fit a flow to the configured initial state"),
        ("evolve", "run Euler-KL or TDVP time evolution"),
        ("reference", "run the grid or moment reference solver"),
        ("eval", "recompute metrics for a checkpoint"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default="qflow_out", help="output directory")
        s.add_argument("--threads", type=int, default=1, help="thread count for numeric kernels")
        if name == "eval":
            s.add_argument("--checkpoint", required=True, help="flow checkpoint to evaluate")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(max(1, args.threads))
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    from qflow.exceptions import InvalidConfigurationError, UnsupportedError

    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed)
    except (ConfigError, InvalidConfigurationError) as exc:
        print(f"qflow: invalid config: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"qflow: {exc}", file=sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    _write_resolved(cfg, out)
    try:
        if args.command == "pretrain":
            cmd_pretrain(cfg, out)
        elif args.command == "evolve":
            cmd_evolve(cfg, out)
        elif args.command == "reference":
            cmd_reference(cfg, out)
        else:
            cmd_eval(cfg, out, args.checkpoint)
    except (ConfigError, InvalidConfigurationError, UnsupportedError) as exc:
        print(f"qflow: refused: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"qflow: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
        print(f"qflow: aborted: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
