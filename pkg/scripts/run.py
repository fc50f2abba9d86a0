#!/usr/bin/python3
"""
Main executable. run() composes the configuration, dispatches to the
subcommand and writes its artifacts together with a run manifest.

    python scripts/run.py simulate --scenario study1 --n 200 --seed 7
    python scripts/run.py replicate --plan time_slope_high --reps 300
    python scripts/run.py sweep --sweep intercept_sigma_b --jobs 4

Any other configuration entry can be set as --key value or key=value.
"""

#external libraries
import json
import os
import shutil
import sys
import time
from pathlib import Path

import torch
from hydra import compose, initialize_config_dir
from hydra.errors import HydraException
from hydra.utils import instantiate
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

# Add the path to the parent directory to augment search for module
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Weights and Biases
import wandb

#self defined imports
from utils import logging
logger = logging.getLogger(__name__)

from data.dataManager import DataManager
from engine.engine import predict_blups
from engine.engineBase import ConfigError
from engine.replicationEngine import ReplicationPlan, compare_cells, run_table
from engine.sweepEngine import bias_point, sweep
from models.modelCreator import spec_from_config
from models.samplers.studySampler import StudyScenario
from utils.diagnostics import DiagnosticThresholds, diagnose
from utils.helpers import package_versions

CONFIG_DIR = str(Path(__file__).resolve().parent.parent / "configs")
_ALIASES = {"n": "n_subjects", "reps": "n_reps", "jobs": "n_jobs", "output-dir": "output_dir"}
_FLAGS = ("force", "full")
FULL_REPS = 2000

USAGE = """usage: run.py <subcommand> [--key value ...] [key=value ...]

subcommands:
  simulate    simulate a dataset from a scenario (CSV + JSON header)
  fit         fit the univariate mixed model (JSON fit + BLUPs CSV)
  fit-joint   fit the joint (Y, R) model (JSON fit + BLUPs CSV)
  bias        closed-form or refit bias of a theory scenario (CSV)
  sweep       bias curve over a parameter grid (CSV)
  replicate   replication table of a plan (CSV + text + per-rep CSV)
  diagnose    pre-analysis diagnostics (JSON report + scatter CSV)

common flags: --seed, --n, --reps, --jobs, --threads, --output-dir, --force, --full
"""

def to_overrides(args):
    """Translates --key value / --flag into Hydra overrides; key=value passes through."""
    overrides = []
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            if "=" not in arg:
                raise ConfigError("Cannot parse argument {0}".format(arg), field=arg)
            overrides.append(arg)
            i += 1
            continue
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif key in _FLAGS and (i + 1 == len(args) or args[i + 1].startswith("--")):
            value = "true"
            i += 1
        else:
            if i + 1 == len(args):
                raise ConfigError("Flag --{0} needs a value".format(key), field=key)
            value = args[i + 1]
            i += 2
        key = _ALIASES.get(key, key).replace("-", "_")
        overrides.append("{0}={1}".format(key, value))
    return overrides

def load_config(overrides):
    with initialize_config_dir(version_base=None, config_dir=CONFIG_DIR):
        return compose(config_name="config", overrides=overrides)

def load_group(group, name):
    """A named config file of a group, for plans and sweeps that reference other configs."""
    path = Path(CONFIG_DIR) / group / "{0}.yaml".format(name)
    if not path.is_file():
        raise ConfigError("No {0} config named {1}".format(group, name), field=group)
    return OmegaConf.load(path)

def run_name(cfg, subcommand):
    if subcommand == "replicate":
        name = cfg.plan.name
    elif subcommand == "sweep":
        name = cfg.sweep.name
    elif cfg.get("dataset", None):
        name = Path(cfg.dataset).stem
    else:
        name = cfg.scenario.name
    return "{0}-{1}-seed{2}".format(subcommand, name, cfg.seed)

def _engine(cfg):
    # positional cfg, as hydra passes it through to the engine constructor
    return instantiate(cfg.engine, cfg)

def _dataset(cfg):
    data_mgr = DataManager(cfg=cfg)
    return data_mgr.init_dataset()

def _frame_writer(frame, index=False):
    return lambda path: frame.to_csv(path, index=index)

def _json_writer(payload):
    def write(path):
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, default=float)
    return write

def cmd_simulate(cfg):
    ds = _dataset(cfg)
    return {"dataset.csv": lambda path: ds.save(path)}

def _fit_artifacts(fit, ds):
    artifacts = {"fit.json": _json_writer(fit.to_dict())}
    if fit.converged:
        artifacts["blups.csv"] = _frame_writer(predict_blups(fit, ds), index=True)
    else:
        logger.warning("Fit did not converge; BLUPs are not written")
    return artifacts

def cmd_fit(cfg):
    ds = _dataset(cfg)
    fit = _engine(cfg).fit_lmm(ds, spec_from_config(cfg.model.univariate))
    logger.info("beta: {0}".format(fit.beta))
    return _fit_artifacts(fit, ds)

def cmd_fit_joint(cfg):
    ds = _dataset(cfg)
    fit = _engine(cfg).fit_joint(ds, spec_from_config(cfg.model.joint))
    logger.info("beta: {0}".format(fit.beta))
    return _fit_artifacts(fit, ds)

def cmd_bias(cfg):
    scenario = StudyScenario.from_config(cfg.scenario)
    report = bias_point(scenario, int(cfg.n_population), int(cfg.seed), n_reps=int(cfg.get("n_reps") or 1),
                        engine_settings=_engine(cfg).settings())
    logger.info("bias {0:.6g} (MC SE {1:.3g})".format(report.bias[0], report.mc_se[0]))
    return {"bias.csv": _frame_writer(report.to_frame())}

def cmd_sweep(cfg):
    sweep_cfg = cfg.sweep
    base = StudyScenario.from_config(load_group("scenario", sweep_cfg.scenario))
    n_reps = int(cfg.n_reps) if cfg.get("n_reps") is not None else int(sweep_cfg.get("n_reps", 1))
    report = sweep(sweep_cfg.operation, sweep_cfg.parameter, list(sweep_cfg.grid), base,
                   n_population=int(sweep_cfg.n_population), seed=int(cfg.seed), n_reps=n_reps,
                   n_jobs=int(cfg.n_jobs), engine_settings=_engine(cfg).settings())
    return {"sweep.csv": _frame_writer(report.to_frame())}

def _plan(plan_cfg, cfg):
    scenario = StudyScenario.from_config(load_group("scenario", plan_cfg.scenario))
    model_cfg = load_group("model", plan_cfg.model)
    n_reps = cfg.get("n_reps", None)
    n_reps_joint = None
    if cfg.get("full", False):
        n_reps = n_reps_joint = FULL_REPS
    elif n_reps is not None:
        n_reps_joint = min(int(n_reps), int(plan_cfg.get("n_reps_joint", None) or n_reps))
    return ReplicationPlan.from_config(plan_cfg, scenario, model_cfg, seed=int(cfg.seed),
                                       n_reps=None if n_reps is None else int(n_reps),
                                       n_reps_joint=n_reps_joint)

def cmd_replicate(cfg):
    plan_cfg = cfg.plan
    cells = plan_cfg.get("cells", None)
    if cells:
        plans = [_plan(load_group("plan", name), cfg) for name in cells]
    else:
        plans = [_plan(plan_cfg, cfg)]
    table = run_table(plans, engine=_engine(cfg), n_jobs=int(cfg.n_jobs))
    text = table.to_text()
    logger.info("\n" + text)
    artifacts = {"table.csv": _frame_writer(table.rows), "table.txt": lambda path: Path(path).write_text(text + "\n"),
                 "estimates.csv": _frame_writer(table.estimates)}
    contrasts = []
    for entry in plan_cfg.get("contrasts", None) or []:
        contrast = compare_cells(table, entry["a"], entry["b"], entry.get("fitter_a", "univariate"),
                                 entry.get("fitter_b", None))
        logger.info(contrast.verdict)
        contrasts.append(vars(contrast))
    if contrasts:
        artifacts["contrasts.json"] = _json_writer(contrasts)
    return artifacts

def cmd_diagnose(cfg):
    ds = _dataset(cfg)
    diag_cfg = cfg.diagnostics
    r_cfg = cfg.model.get("interval", None)
    report = diagnose(ds, spec_from_config(cfg.model.univariate),
                      r_spec=None if r_cfg is None else spec_from_config(r_cfg),
                      covariates=list(diag_cfg.get("covariates", None) or []),
                      thresholds=DiagnosticThresholds.from_config(diag_cfg.get("thresholds", None)),
                      engine=_engine(cfg))
    artifacts = {"report.json": _json_writer(report.to_dict())}
    if report.scatter is not None:
        artifacts["scatter.csv"] = _frame_writer(report.scatter, index=True)
    return artifacts

_COMMAND_DICT = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "fit-joint": cmd_fit_joint,
    "bias": cmd_bias,
    "sweep": cmd_sweep,
    "replicate": cmd_replicate,
    "diagnose": cmd_diagnose,
}
SUBCOMMANDS = tuple(_COMMAND_DICT)

def write_artifacts(out_dir, artifacts, manifest):
    """Writes into a staging directory first so a failed write leaves nothing behind."""
    staging = out_dir.with_name(out_dir.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        for name, writer in artifacts.items():
            writer(staging / name)
        # writers may add companions (the dataset header)
        manifest["artifacts"] = sorted(p.name for p in staging.iterdir())
        with open(staging / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, default=str)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        staging.rename(out_dir)
    except Exception:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return manifest["artifacts"]

def run(argv=None):
    """Runs one subcommand; returns the exit status (0 ok, 1 configuration error, 2 usage)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    logger.info("Willkommen!")
    if not argv or argv[0] not in _COMMAND_DICT:
        if argv:
            logger.error("Unknown subcommand {0}".format(argv[0]))
        sys.stderr.write(USAGE)
        return 2
    subcommand = argv[0]
    start = time.time()
    try:
        cfg = load_config(to_overrides(argv[1:]))
        out_dir = Path(cfg.output_dir) / run_name(cfg, subcommand)
        if out_dir.exists() and not cfg.force:
            raise ConfigError("Output directory {0} exists; pass --force to overwrite".format(out_dir), field="force")
    except (ConfigError, HydraException, OmegaConfBaseException) as err:
        logger.error("Invalid configuration{0}: {1}".format(
            " ({0})".format(err.field) if getattr(err, "field", None) else "", err))
        return 1

    torch.set_num_threads(int(cfg.threads))
    # initialise wandb logging. Use mode='disabled' to prevent logging
    mode = 'online' if cfg.wandb_enabled else 'disabled'
    wandb.init(project="visitbias", config=OmegaConf.to_container(cfg, resolve=True), mode=mode)
    try:
        artifacts = _COMMAND_DICT[subcommand](cfg)
        manifest = {"subcommand": subcommand, "argv": argv, "config": OmegaConf.to_container(cfg, resolve=True),
                    "seed": int(cfg.seed), "versions": package_versions(), "wall_time": time.time() - start}
        written = write_artifacts(out_dir, artifacts, manifest)
    except (ConfigError, HydraException, OmegaConfBaseException, FileNotFoundError, KeyError, ValueError) as err:
        logger.error("{0} failed: {1}".format(subcommand, err))
        return 1
    finally:
        wandb.finish()
    logger.info("Wrote {0} to {1}".format(", ".join(written), out_dir))
    logger.info("Auf Wiedersehen!")
    return 0

if __name__=="__main__":
    sys.exit(run())
