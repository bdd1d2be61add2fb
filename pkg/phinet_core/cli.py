"""
CLI Module
==========

The ``phinet`` command: synthetic data generation, training, ablation sweeps,
evaluation, gradient checking and plotting. Every command works inside a run directory
(``--run-dir``) where it writes its artifacts, a JSON-lines log and one
``manifest.json``.

Configuration precedence: built-in defaults < preset < config file (``--config``) <
command-line flags. The resolved configuration is written to ``config.resolved``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""

import argparse
import csv
import dataclasses
import datetime
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from phinet_core.abstract import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, AbstractComponent, CheckpointError, ConfigurationError, PhiNetError
from phinet_core.config import (
    ABLATION_ROWS,
    MODEL_PRESETS,
    PROTOCOL_PRESETS,
    SWEEPS,
    TRAIN_PRESETS,
    LossFlags,
    config_digest,
    dump_config,
    load_config,
    model_preset,
    protocol_preset,
    train_preset,
)
from phinet_core.gradcheck import run_gradcheck
from phinet_core.log_utils import FileLogger, TerminalLogger, configurate_logger, log_exception, plot_mask_strips, plot_metrics
from phinet_core.propagate import evaluate_dataset, mean_collapse, mean_scores
from phinet_core.trainer import Trainer, list_checkpoints, load_checkpoint
from phinet_core.videodata import generate_dataset, read_dataset, static_dataset, write_dataset

SCORE_COLUMNS = ("J_m", "F_m", "J&F_m", "feature_std", "effective_rank")
ABLATION_COLUMNS = ("row", "seed", "symmetric", "use_h", "g_kind", "use_noise", "use_ema_target", "sg_prior", "sg_post", *SCORE_COLUMNS, "status")


@dataclass
class RunManifest:
    """What a command did, enough to re-run it."""

    command: str
    config: str = ""
    config_sha256: str = ""
    seed: int = 0
    started: str = ""
    finished: str = ""
    artifacts: list = field(default_factory=list)
    exit_code: int = EXIT_OK

    def write(self, run_dir):
        path = Path(run_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        return path


def _now():
    return datetime.datetime.now().isoformat(timespec="seconds")


def _argv_of(args):
    """The arguments this command was invoked with, as given to ``main``."""
    return list(getattr(args, "argv", None) or [args.command])


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors become ConfigurationError (exit code 1)."""

    def error(self, message):
        raise ConfigurationError(message)


class Command(AbstractComponent):
    """One invocation of a subcommand."""

    @staticmethod
    def name():
        return "cli"

    @staticmethod
    def description():
        return "Command line entry point of phinet-core."

    def __init__(self, args, **kwargs):
        self.args = args
        self.run_dir = Path(args.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        configurate_logger(log_path=self.run_dir / "logs.log")
        super().__init__(**kwargs)
        self.manifest = RunManifest(command=" ".join(_argv_of(args)), seed=args.seed, started=_now())

    def reattach_loggers(self):
        """Point the loggers back at this run's log file after a nested run replaced them."""
        configurate_logger(log_path=self.run_dir / "logs.log")
        self.terminal_logger = TerminalLogger().bind(module=self.name())
        self.file_logger = FileLogger().bind(module=self.name())

    def finish(self, exit_code=EXIT_OK):
        self.manifest.finished = _now()
        self.manifest.exit_code = exit_code
        self.manifest.write(self.run_dir)
        return exit_code


#################
# Config resolution
#################


def resolve_flags(args, flags=None):
    """Apply the loss-flag options on top of `flags`."""
    flags = flags or LossFlags()
    updates = {}
    if getattr(args, "no_symmetric", False):
        updates["symmetric"] = False
    if getattr(args, "no_h", False):
        updates["use_h"] = False
    if getattr(args, "g", None) is not None:
        updates["g_kind"] = args.g
    if getattr(args, "no_noise", False):
        updates["use_noise"] = False
    if getattr(args, "no_ema", False):
        updates["use_ema_target"] = False
    sg = getattr(args, "sg", None)
    if sg is not None:
        updates["sg_prior"], updates["sg_post"] = {"prior": (True, False), "post": (False, True), "none": (False, False)}[sg]
    return dataclasses.replace(flags, **updates)


def resolve_configs(args):
    """defaults < preset < config file < flags.

    Returns:
        tuple: (ModelConfig, TrainConfig, PropagationParams)
    """
    model_cfg = model_preset(args.model or args.preset)
    train_cfg = train_preset(args.preset)
    eval_params = protocol_preset(getattr(args, "protocol", None) or "davis")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        model_cfg, train_cfg, eval_params = load_config(path.read_text(encoding="utf-8"), model_cfg, train_cfg, eval_params)
    overrides = {
        "total_epochs": args.epochs,
        "batch_size": args.batch_size,
        "micro_batch_size": args.micro_batch_size,
        "lr": args.lr,
        "beta": args.beta,
        "sigma_eps": args.sigma_eps,
        "k_min": args.k_min,
        "k_max": args.k_max,
        "warmup_epochs": args.warmup_epochs,
        "seed": args.seed,
        "ema_cadence": args.ema_cadence,
        "clip_grad_norm": args.clip_grad_norm,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "total_epochs" in overrides and "warmup_epochs" not in overrides:
        overrides["warmup_epochs"] = min(train_cfg.warmup_epochs, overrides["total_epochs"])
    train_cfg = dataclasses.replace(train_cfg, flags=resolve_flags(args, train_cfg.flags), **overrides)
    eval_params = resolve_eval_params(args, eval_params)
    return model_cfg, train_cfg, eval_params


def resolve_eval_params(args, eval_params):
    overrides = {
        "top_k": getattr(args, "top_k", None),
        "radius": getattr(args, "radius", None),
        "queue": getattr(args, "queue", None),
        "temperature": getattr(args, "temperature", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "upsample", False):
        overrides["upsample"] = True
    return dataclasses.replace(eval_params, **overrides)


def load_videos(args, model_cfg):
    if args.data:
        return read_dataset(args.data)
    return generate_dataset(image_size=model_cfg.image_size, seed=args.data_seed)


#################
# Commands
#################


def cmd_gen_data(args):
    command = Command(args)
    out = Path(args.out) if args.out else command.run_dir / "data"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigurationError(f"output directory {out} is not empty, use --force to overwrite")
    generate = static_dataset if args.static else generate_dataset
    kwargs = dict(n_videos=args.n_videos, n_frames=args.frames, image_size=args.image_size, seed=args.seed)
    if not args.static:
        kwargs["n_shapes"] = args.n_shapes
    videos = generate(**kwargs)
    write_dataset(videos, out)
    command.terminal_logger.info("dataset_written", path=str(out), n_videos=len(videos), n_frames=args.frames)
    command.file_logger.info("dataset_written", path=str(out), n_videos=len(videos), n_frames=args.frames)
    command.manifest.config = json.dumps(kwargs, sort_keys=True)
    command.manifest.config_sha256 = config_digest(command.manifest.config)
    command.manifest.artifacts = [str(out)]
    return command.finish()


def cmd_train(args):
    command = Command(args)
    model_cfg, train_cfg, _ = resolve_configs(args)
    videos = load_videos(args, model_cfg)
    trainer = Trainer(model_cfg, train_cfg, run_dir=command.run_dir, resume=not args.no_resume)
    state = trainer.train(videos)
    text = dump_config(model_cfg, train_cfg)
    command.manifest.config = text
    command.manifest.config_sha256 = config_digest(text)
    command.manifest.artifacts = [str(p) for p in list_checkpoints(command.run_dir)] + [str(trainer.metrics_path)]
    command.terminal_logger.info("train_done", epoch=state.epoch, step=state.step)
    return command.finish()


@dataclass(frozen=True)
class AblationJob:
    """One trained-and-evaluated run of ``phinet ablate``."""

    name: str
    seed: int
    flags: LossFlags
    overrides: tuple = ()

    @property
    def run_name(self):
        return f"{self.name}_seed{self.seed}"


def ablation_jobs(args):
    """The jobs of an ablate invocation: ablation rows, or one sweep of the proposed row."""
    seeds = [int(s) for s in args.seeds.split(",")]
    if args.sweep:
        if args.rows:
            raise ConfigurationError("--rows and --sweep are exclusive")
        key, values = SWEEPS[args.sweep]
        return [
            AblationJob(f"{key}={value:g}", seed, ABLATION_ROWS["proposed"], ((key, value),)) for value in values for seed in seeds
        ]
    names = [r.strip() for r in args.rows.split(",")] if args.rows else list(ABLATION_ROWS)
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown:
        raise ConfigurationError(f"unknown ablation rows {unknown}, expected some of {list(ABLATION_ROWS)}")
    order = list(ABLATION_ROWS)
    names = sorted(set(names), key=order.index)
    return [AblationJob(row, seed, ABLATION_ROWS[row]) for row in names for seed in seeds]


def _run_ablation_row(job, args_dict):
    """Train and evaluate one job in its own run directory.

    Returns:
        tuple: (J_m, F_m, J&F_m, feature_std, effective_rank)
    """
    args = argparse.Namespace(**args_dict)
    model_cfg, train_cfg, eval_params = resolve_configs(args)
    train_cfg = dataclasses.replace(train_cfg, flags=job.flags, seed=job.seed, **dict(job.overrides))
    run_dir = Path(args.run_dir) / job.run_name
    configurate_logger(log_path=run_dir / "logs.log")
    manifest = RunManifest(command=" ".join([*_argv_of(args), f"[{job.run_name}]"]), seed=job.seed, started=_now())
    manifest.config = dump_config(model_cfg, train_cfg, eval_params)
    manifest.config_sha256 = config_digest(manifest.config)
    try:
        videos = load_videos(args, model_cfg)
        trainer = Trainer(model_cfg, train_cfg, run_dir=run_dir)
        state = trainer.train(videos)
        scores = evaluate_dataset(state.model.encoder, videos, eval_params, out_dir=run_dir / "eval")
    except Exception as e:
        manifest.finished = _now()
        manifest.exit_code = exit_code_of(e)
        manifest.write(run_dir)
        raise
    manifest.artifacts = [str(p) for p in list_checkpoints(run_dir)] + [str(trainer.metrics_path), str(run_dir / "eval" / "scores.csv")]
    manifest.finished = _now()
    manifest.write(run_dir)
    return mean_scores(scores) + mean_collapse(scores)


def _flag_cells(flags):
    return {
        "symmetric": flags.symmetric,
        "use_h": flags.use_h,
        "g_kind": flags.g_kind.value,
        "use_noise": flags.use_noise,
        "use_ema_target": flags.use_ema_target,
        "sg_prior": flags.sg_prior,
        "sg_post": flags.sg_post,
    }


def render_table(rows):
    """Fixed-width text rendering of the ablation rows."""
    header = ["row", "seed", "symm", "h", "g", "eps", "EMA", "SG-prior", "SG-post", "J&F_m", "std"]
    mark = {True: "yes", False: "-", "True": "yes", "False": "-"}
    lines = []
    for r in rows:
        lines.append(
            [
                r["row"],
                str(r["seed"]),
                mark[r["symmetric"]],
                mark[r["use_h"]],
                "TF" if r["g_kind"] == "transformer" else "lin",
                mark[r["use_noise"]],
                mark[r["use_ema_target"]],
                mark[r["sg_prior"]],
                mark[r["sg_post"]],
                r["J&F_m"] if r["status"] == "ok" else r["status"],
                r["feature_std"],
            ]
        )
    widths = [max(len(h), *(len(line[i]) for line in lines)) for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    out += ["  ".join(c.ljust(w) for c, w in zip(line, widths)) for line in lines]
    return "\n".join(out) + "\n"


def cmd_ablate(args):
    command = Command(args)
    jobs = ablation_jobs(args)
    args_dict = vars(args).copy()

    results = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as executor:
            futures = {job.run_name: executor.submit(_run_ablation_row, job, args_dict) for job in jobs}
            for run_name, future in futures.items():
                try:
                    results[run_name] = future.result()
                except Exception as e:
                    log_exception(command, e)
                    results[run_name] = e
    else:
        for job in jobs:
            try:
                results[job.run_name] = _run_ablation_row(job, args_dict)
            except Exception as e:
                results[job.run_name] = e
            command.reattach_loggers()
            if isinstance(results[job.run_name], Exception):
                log_exception(command, results[job.run_name])

    rows = []
    for job in jobs:
        result = results[job.run_name]
        cells = {"row": job.name, "seed": job.seed, **_flag_cells(job.flags)}
        if isinstance(result, Exception):
            cells.update({key: "" for key in SCORE_COLUMNS})
            cells["status"] = type(result).__name__
        else:
            cells.update({key: f"{value:.6f}" for key, value in zip(SCORE_COLUMNS, result)})
            cells["status"] = "ok"
        command.file_logger.info("ablation_row", **cells)
        rows.append(cells)

    csv_path = command.run_dir / "ablation.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    table = render_table(rows)
    (command.run_dir / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")

    model_cfg, train_cfg, eval_params = resolve_configs(args)
    command.manifest.config = dump_config(model_cfg, train_cfg, eval_params)
    command.manifest.config_sha256 = config_digest(command.manifest.config)
    command.manifest.artifacts = [str(csv_path), str(command.run_dir / "ablation.txt")]
    failures = [r for r in results.values() if isinstance(r, Exception)]
    exit_code = exit_code_of(failures[0]) if failures else EXIT_OK
    return command.finish(exit_code)


def cmd_eval(args):
    command = Command(args)
    if args.checkpoint:
        checkpoint = Path(args.checkpoint)
    else:
        found = list_checkpoints(command.run_dir)
        if not found:
            raise CheckpointError(f"no checkpoint given and none found under {command.run_dir / 'checkpoints'}")
        checkpoint = found[-1]
    state, model_cfg, train_cfg = load_checkpoint(checkpoint)
    eval_params = resolve_eval_params(args, protocol_preset(args.protocol))
    if args.static:
        videos = static_dataset(image_size=model_cfg.image_size, seed=args.data_seed)
    elif args.data:
        videos = read_dataset(args.data)
    else:
        videos = generate_dataset(image_size=model_cfg.image_size, seed=args.data_seed)
    encoder = state.ema.encoder if args.use_ema else state.model.encoder
    out = Path(args.out) if args.out else command.run_dir / "eval"
    scores = evaluate_dataset(encoder, videos, eval_params, out_dir=out)
    j, f, jf = mean_scores(scores)
    std, rank = mean_collapse(scores)
    command.terminal_logger.info("eval_done", J_m=j, F_m=f, JF_m=jf, feature_std=std, effective_rank=rank)
    command.file_logger.info("eval_done", J_m=j, F_m=f, JF_m=jf, feature_std=std, effective_rank=rank)
    print(f"J_m {j:.4f}  F_m {f:.4f}  J&F_m {jf:.4f}  feature_std {std:.4f}  effective_rank {rank:.2f}")
    command.manifest.config = dump_config(model_cfg, train_cfg, eval_params, extra={"run": {"checkpoint": checkpoint}})
    command.manifest.config_sha256 = config_digest(command.manifest.config)
    command.manifest.artifacts = [str(out / "scores.csv"), str(out / "masks")]
    return command.finish()


def cmd_gradcheck(args):
    command = Command(args)
    report = run_gradcheck(seed=args.seed, fault=args.inject_fault)
    print(report.render())
    command.manifest.config = json.dumps({"seed": args.seed, "inject_fault": args.inject_fault})
    command.manifest.config_sha256 = config_digest(command.manifest.config)
    if not report.passed:
        command.terminal_logger.error("gradcheck_failed", groups=report.failures)
        return command.finish(EXIT_NUMERICAL)
    return command.finish()


def cmd_plot(args):
    command = Command(args)
    if not args.metrics and not args.masks:
        raise ConfigurationError("plot needs --metrics and/or --masks")
    out = Path(args.out) if args.out else command.run_dir / "figures"
    artifacts = []
    if args.metrics:
        artifacts.append(plot_metrics(args.metrics, out))
    if args.masks:
        artifacts.extend(plot_mask_strips(args.masks, out))
    command.manifest.artifacts = artifacts
    return command.finish()


#################
# Parser
#################


def _add_common(parser, default_run_dir):
    parser.add_argument("--run-dir", default=default_run_dir, help="directory of all artifacts (default: %(default)s)")
    parser.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")


def _add_train_options(parser):
    parser.add_argument("--preset", default="desk", choices=sorted(TRAIN_PRESETS), help="training preset (default: %(default)s)")
    parser.add_argument("--model", default=None, choices=sorted(MODEL_PRESETS), help="model preset (default: same as --preset)")
    parser.add_argument("--config", default=None, help="config file applied on top of the preset")
    parser.add_argument("--data", default=None, help="dataset directory (default: generate the standard desk dataset)")
    parser.add_argument("--data-seed", type=int, default=0, help="seed of the generated dataset (default: %(default)s)")
    parser.add_argument("--epochs", type=int, default=None, help="total epochs (paper preset: 400)")
    parser.add_argument("--warmup-epochs", type=int, default=None, help="warmup epochs (paper preset: 40)")
    parser.add_argument("--batch-size", type=int, default=None, help="batch size (paper preset: 768)")
    parser.add_argument("--micro-batch-size", type=int, default=None, help="gradient accumulation chunk (default: whole batch)")
    parser.add_argument("--lr", type=float, default=None, help="base learning rate (paper preset: 1.5e-4)")
    parser.add_argument("--beta", type=float, default=None, help="KL regularizer beta (default: 0.01)")
    parser.add_argument("--sigma-eps", type=float, default=None, help="future-frame noise (default: 0.5)")
    parser.add_argument("--k-min", type=int, default=None, help="smallest frame gap (default: 4)")
    parser.add_argument("--k-max", type=int, default=None, help="largest frame gap (default: 48)")
    parser.add_argument("--ema-cadence", default=None, choices=["per_epoch", "per_step"], help="EMA cadence (default: per_epoch)")
    parser.add_argument("--clip-grad-norm", type=float, default=None, help="gradient clipping norm (default: off)")
    parser.add_argument("--no-symmetric", action="store_true", help="chronological loss only")
    parser.add_argument("--no-h", action="store_true", help="remove the CA3 predictor h")
    parser.add_argument("--g", default=None, help="CA1 predictor kind: transformer or linear (default: transformer)")
    parser.add_argument("--no-noise", action="store_true", help="no noise on the future frame")
    parser.add_argument("--no-ema", action="store_true", help="online encoder as Sim-2 target")
    parser.add_argument("--sg", default=None, choices=["prior", "post", "none"], help="stop-gradient placement (default: prior)")


def _add_eval_options(parser):
    parser.add_argument("--protocol", default="davis", choices=sorted(PROTOCOL_PRESETS), help="(top-k, radius, queue): davis 7/30/30, vip 7/5/3, jhmdb 10/5/30")
    parser.add_argument("--top-k", type=int, default=None, help="override top-k")
    parser.add_argument("--radius", type=int, default=None, help="override neighbourhood radius (patches)")
    parser.add_argument("--queue", type=int, default=None, help="override queue length")
    parser.add_argument("--temperature", type=float, default=None, help="affinity temperature (default: 0.1)")
    parser.add_argument("--upsample", action="store_true", help="score at full resolution")


def build_parser():
    parser = ArgumentParser(prog="phinet", description="PhiNet v2 self-supervised video learning at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen-data", help="write a synthetic labeled video dataset")
    _add_common(p, "runs/data")
    p.add_argument("--out", default=None, help="output directory (default: <run-dir>/data)")
    p.add_argument("--n-videos", type=int, default=16, help="number of videos (default: %(default)s)")
    p.add_argument("--frames", type=int, default=64, help="frames per video (default: %(default)s)")
    p.add_argument("--image-size", type=int, default=32, help="frame side in pixels (default: %(default)s)")
    p.add_argument("--n-shapes", type=int, default=2, help="moving shapes per video (default: %(default)s)")
    p.add_argument("--static", action="store_true", help="shapes do not move")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pre-train a model")
    _add_common(p, "runs/train")
    _add_train_options(p)
    p.add_argument("--no-resume", action="store_true", help="ignore checkpoints already in the run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train and evaluate the ablation rows")
    _add_common(p, "runs/ablate")
    _add_train_options(p)
    _add_eval_options(p)
    p.add_argument("--rows", default=None, help=f"comma separated rows (default: all of {','.join(ABLATION_ROWS)})")
    p.add_argument("--sweep", default=None, choices=sorted(SWEEPS), help="sweep one hyper-parameter of the proposed row instead of --rows")
    p.add_argument("--seeds", default="0", help="comma separated seeds (default: %(default)s)")
    p.add_argument("--jobs", type=int, default=1, help="rows run in parallel processes (default: %(default)s)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint by label propagation")
    _add_common(p, "runs/train")
    _add_eval_options(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint file (default: last one in <run-dir>/checkpoints)")
    p.add_argument("--data", default=None, help="dataset directory (default: generate the standard desk dataset)")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the generated dataset (default: %(default)s)")
    p.add_argument("--static", action="store_true", help="evaluate on the static sanity dataset")
    p.add_argument("--use-ema", action="store_true", help="evaluate the slow encoder")
    p.add_argument("--out", default=None, help="output directory (default: <run-dir>/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_common(p, "runs/gradcheck")
    p.add_argument("--inject-fault", default=None, choices=["sim2"], help="break a loss term on purpose")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="training curves and mask strips")
    _add_common(p, "runs/plot")
    p.add_argument("--metrics", default=None, help="metrics CSV of a run")
    p.add_argument("--masks", default=None, help="directory of predicted masks")
    p.add_argument("--out", default=None, help="output directory (default: <run-dir>/figures)")
    p.set_defaults(func=cmd_plot)
    return parser


def exit_code_of(exception):
    if isinstance(exception, PhiNetError):
        return exception.exit_code
    if isinstance(exception, OSError):
        return EXIT_IO
    if isinstance(exception, ArithmeticError):
        return EXIT_NUMERICAL
    return EXIT_USAGE


def main(argv=None):
    """Entry point of the ``phinet`` console script; returns the exit code."""
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        args = build_parser().parse_args(argv)
        args.argv = argv
        return args.func(args)
    except Exception as e:
        print(f"phinet: error: {e}", file=sys.stderr)
        return exit_code_of(e)


if __name__ == "__main__":
    sys.exit(main())
