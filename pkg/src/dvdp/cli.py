"""``dvdp`` command line: schedule | forward | sample | train | verify.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .cascade import EXPLICIT, CascadeError, build_cascade
from .config import ConfigError, RunConfig, defaults, load
from .denoiser import AnalyticDenoiser
from .mixture import GaussianMixture
from .mlp import MlpDenoiser, TrainConfig, TrainingDiverged, train
from .process import ProcessError, forward_trajectory
from .sampler import SamplerConfig, SamplerError, sample_items
from .schedule import ScheduleError, build_schedule
from .verify import default_mixture, turning_error

log = logging.getLogger("dvdp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _ConfigProblem(Exception):
    """Raised while turning a config into objects; always exit code 2."""


def _setup(cfg: RunConfig):
    casc, sched = cfg["cascade"], cfg["schedule"]
    try:
        c = build_cascade(casc["base_shape"], casc["K"], casc["backend"])
        s = build_schedule(
            sched["T"],
            sched["turning_points"],
            factors=c.factors,
            lambda_min=sched["lambda_min"],
            beta_lo=sched["beta_lo"],
            beta_hi=sched["beta_hi"],
        )
    except (CascadeError, ScheduleError) as exc:
        raise _ConfigProblem(str(exc)) from exc
    return c, s


def _mixture(cfg: RunConfig, shape) -> GaussianMixture:
    data = cfg["data"]
    if data["dataset"]:
        raise _ConfigProblem("this command needs a mixture in [data], not 'dataset'")
    if not data["means"]:
        return default_mixture(shape, data["components"], data["seed"])
    size = int(np.prod(shape))
    for j, mu in enumerate(data["means"]):
        if len(mu) != size:
            raise _ConfigProblem(f"key 'means' in [data]: component {j} has {len(mu)} entries, shape {shape} needs {size}")
    try:
        means = np.asarray(data["means"]).reshape((-1,) + tuple(shape))
        return GaussianMixture.isotropic(data["weights"], means, data["stds"])
    except ValueError as exc:
        raise _ConfigProblem(f"[data]: {exc}") from exc


def _training_data(cfg: RunConfig, c):
    path = cfg["data"]["dataset"]
    if not path:
        return _mixture(cfg, c.shapes[0])
    arr = _read(path)
    if arr.shape[1:] != c.shapes[0]:
        raise _ConfigProblem(f"key 'dataset' in [data]: items have shape {arr.shape[1:]}, cascade expects {c.shapes[0]}")
    return arr.astype(np.float64)


def _read(path) -> np.ndarray:
    try:
        return io.read_tensor(path)
    except (OSError, io.FormatError) as exc:
        raise _ConfigProblem(f"cannot read tensor {path}: {exc}") from exc


def _emit(out: Optional[Path], name: str, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        (out / name).write_text(text, encoding="utf-8")


def cmd_schedule(cfg: RunConfig, out: Optional[Path]) -> int:
    c, s = _setup(cfg)
    header = ["t", "sigma_bar"] + [f"lambda_bar_{k}" for k in range(s.levels + 1)]
    rows = ([t, s.sigma_bar[t], *s.lambda_bar[:, t]] for t in range(s.T + 1))
    _emit(out, "schedule.csv", io.csv_text(header, rows))
    return EXIT_OK


def cmd_forward(cfg: RunConfig, out: Optional[Path]) -> int:
    c, s = _setup(cfg)
    fwd = cfg["forward"]
    if not fwd["input"]:
        raise _ConfigProblem("key 'input' in [forward] is required")
    x0 = _read(fwd["input"])
    base = c.shapes[0]
    if x0.shape[len(x0.shape) - len(base):] != base:
        raise _ConfigProblem(f"input shape {x0.shape} does not end with the cascade shape {base}")
    times = fwd["times"] or (0, *s.turning_points, s.T)
    bad = [t for t in times if not 0 <= t <= s.T]
    if bad:
        raise _ConfigProblem(f"key 'times' in [forward]: {bad} outside [0, {s.T}]")
    wanted = set(times)
    out = out or Path(".")
    states = forward_trajectory(c, s, x0.astype(np.float64), np.random.default_rng(fwd["seed"]))
    written = 0
    for st in states:
        if st.time in wanted:
            io.write_tensor(out / f"x_t{st.time:04d}_k{st.level}.dvtf", st.data.astype(x0.dtype))
            written += 1
    log.info("wrote %d trajectory checkpoints to %s", written, out)
    return EXIT_OK


def _metadata(cfg: RunConfig, c, s) -> dict:
    return {
        "schedule": s.fingerprint(),
        "base_shape": list(c.shapes[0]),
        "K": c.levels,
        "backend": c.backend,
        "hidden": cfg["train"]["hidden"],
    }


def cmd_train(cfg: RunConfig, out: Optional[Path]) -> int:
    c, s = _setup(cfg)
    tr = cfg["train"]
    data = _training_data(cfg, c)
    model = MlpDenoiser(c, s, hidden=tr["hidden"], rng=np.random.default_rng([tr["seed"], 0]))
    tcfg = TrainConfig(tr["iterations"], tr["batch"], tr["lr"], tr["seed"], tr["level_rule"], tr["lr_final"])
    model, trace = train(model, data, tcfg, np.random.default_rng([tr["seed"], 1]))
    out = out or Path(".")
    io.write_checkpoint(out / "checkpoint.dvck", model.params, _metadata(cfg, c, s))
    (out / "loss.csv").write_text(io.csv_text(["iteration", "loss"], enumerate(trace)), encoding="utf-8")
    if len(trace):
        log.info("trained %d iterations, final loss %.5f", len(trace), trace[-1])
    return EXIT_OK


def _load_model(cfg: RunConfig, c, s, path) -> MlpDenoiser:
    try:
        params, meta = io.read_checkpoint(path)
    except (OSError, io.FormatError, ValueError) as exc:
        raise _ConfigProblem(f"cannot read checkpoint {path}: {exc}") from exc
    expect = _metadata(cfg, c, s)
    for key in ("schedule", "base_shape", "K", "backend"):
        if meta.get(key) != expect[key]:
            raise _ConfigProblem(f"checkpoint {path} was trained with {key}={meta.get(key)!r}, config gives {expect[key]!r}")
    model = MlpDenoiser(c, s, hidden=int(meta.get("hidden", cfg["train"]["hidden"])))
    if set(params) != set(model.params):
        raise _ConfigProblem(f"checkpoint {path} has parameters {sorted(params)}")
    for name, arr in params.items():
        if arr.shape != model.params[name].shape:
            raise _ConfigProblem(f"checkpoint parameter {name} has shape {arr.shape}")
        model.params[name] = arr.astype(np.float64)
    return model


def _threads() -> int:
    raw = os.environ.get("DVDP_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise _ConfigProblem(f"DVDP_THREADS must be an integer, got {raw!r}") from exc
    if n == 0:
        return os.cpu_count() or 1
    return max(n, 1)


def cmd_sample(cfg: RunConfig, out: Optional[Path]) -> int:
    c, s = _setup(cfg)
    sm = cfg["sample"]
    if sm["checkpoint"]:
        den = _load_model(cfg, c, s, sm["checkpoint"])
    else:
        den = AnalyticDenoiser(_mixture(cfg, c.shapes[0]), c, s)
    scfg = SamplerConfig(mode=sm["mode"], ddim_steps=sm["ddim_steps"], eta_window=sm["eta_window"], seed=sm["seed"])
    try:
        scfg.validate(s)
    except SamplerError as exc:
        raise _ConfigProblem(str(exc)) from exc
    xs = sample_items(c, s, den, sm["count"], scfg, threads=_threads())
    out = out or Path(".")
    for i, x in enumerate(xs):
        io.write_tensor(out / f"sample_{i:04d}.dvtf", x)
        if sm["pgm"]:
            io.write_pgm(out / f"sample_{i:04d}.pgm", x)
    log.info("wrote %d samples to %s", len(xs), out)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Optional[Path]) -> int:
    c, _ = _setup(cfg)
    if c.backend != EXPLICIT:
        raise _ConfigProblem("key 'backend' in [cascade] must be explicit-dense for verify")
    if c.levels < 1:
        raise _ConfigProblem("verify needs at least one turning point (K >= 1)")
    gm = _mixture(cfg, c.shapes[0])
    sched, ver = cfg["schedule"], cfg["verify"]
    firsts = ver["first_turns"] or (sched["turning_points"][0],)
    rows = []
    i = 0
    for t1 in firsts:
        for lm in ver["lambda_mins"]:
            try:
                s = build_schedule(
                    sched["T"], (t1, *sched["turning_points"][1:]), factors=c.factors,
                    lambda_min=lm, beta_lo=sched["beta_lo"], beta_hi=sched["beta_hi"],
                )
            except ScheduleError as exc:
                raise _ConfigProblem(str(exc)) from exc
            rep = turning_error(gm, s, 1, ver["n"], np.random.default_rng([ver["seed"], i]), cascade=c)
            rows.append([lm, t1, rep.jsd_estimate, rep.stderr, rep.bound_value, rep.verdict])
            log.info(
                "lambda_min=%g T1=%d  jsd=%.3e ± %.1e  bound=%.3e  %s",
                lm, t1, rep.jsd_estimate, rep.stderr, rep.bound_value, "pass" if rep.verdict else "FAIL",
            )
            i += 1
    _emit(out, "verify.csv", io.csv_text(["lambda_min", "T1", "jsd", "stderr", "bound", "verdict"], rows))
    n_pass = sum(r[-1] for r in rows)
    log.info("%d/%d configurations within the bound", n_pass, len(rows))
    return EXIT_OK


COMMANDS = {
    "schedule": cmd_schedule,
    "forward": cmd_forward,
    "sample": cmd_sample,
    "train": cmd_train,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvdp", description="Diffusion with a state that shrinks at scheduled turning points.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="INI run configuration")
        sp.add_argument("--out", type=Path, help="output directory (default: stdout for CSV, else .)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = load(args.config) if args.config else defaults()
        if args.seed is not None:
            cfg.override_seed(args.seed)
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, _ConfigProblem) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (FloatingPointError, TrainingDiverged, SamplerError, ProcessError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
