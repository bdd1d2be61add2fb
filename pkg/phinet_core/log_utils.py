"""
Log Utils Module
================

This file defines the logging system of phinet-core, which provides components with the
capacity to create structured (dictionary) log messages that they can either store in a
log file, or print in the terminal.
The file is divided in 3 parts :
- Log filters : defines general filters that can be used in the log configuration to
filter out the desired log messages.
- Loggers & Functions : defines the terminal and file logger classes, and logging-related
functions for components.
- Plot logs : defines the functions used to visualize a run after its execution (training
curves from the metrics CSV, mask strips from predicted label maps).
"""

import csv
import os
import re
import sys
from pathlib import Path

import colorama
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import structlog


#############
# Log Filters
#############


def filter_has_key(_, __, event_dict, key):
    """Delete the log if it has the key in its event_dict.

    Args:
        event_dict (dict): the log message's dict, containing all parameters passed during logging.
        key (str): the key to match in event_dict.

    Returns:
        dict : returns the log_message's event_dict if it went through the filter.
    """
    if event_dict.get(key):
        raise structlog.DropEvent
    return event_dict


def filter_value_in_list(_, __, event_dict, key, values):
    """Delete the log if it has the key, and the corresponding value is in values.

    Args:
        event_dict (dict): the log message's dict, containing all parameters passed during logging.
        key (str): the key to match in event_dict.
        values (list[str]): values to match in event_dict.

    Returns:
        dict : returns the log_message's event_dict if it went through the filter.
    """
    if event_dict.get(key):
        if event_dict.get(key) in values:
            raise structlog.DropEvent
    return event_dict


def filter_conditions(_, __, event_dict, conditions):
    """Only keep logs that match EVERY condition.

    A condition is a tuple (key, values). To verify the condition, the log message has to
    have the `key`, and the value corresponding to the key has to be in `values`.

    Example :
    conditions = [("module", ["Trainer"]), ("event", ["train_step", "ema_update"])]
    KEEP IF module is "Trainer" AND event is in ["train_step", "ema_update"]

    Args:
        event_dict (dict): the log message's dict, containing all parameters passed during logging.
        conditions (list[tuple[str,list[str]]]): the conditions the event_dict needs to match.

    Returns:
        dict : returns the log_message's event_dict if it went through the filter.
    """
    for key, values in conditions:
        if event_dict.get(key) in values:
            continue
        raise structlog.DropEvent
    return event_dict


def filter_cases(_, __, event_dict, cases):
    """Keep logs that match ANY case, a case being a list of conditions (see
    `filter_conditions`).

    Example :
    cases = [[("module", ["Trainer"]), ("event", ["checkpoint_saved"])],
    [("module", ["Evaluator"])]]

    Args:
        event_dict (dict): the log message's dict, containing all parameters passed during logging.
        cases (list[list[tuple[str,list[str]]]]): the cases the event_dict needs to match.

    Returns:
        dict : returns the log_message's event_dict if it went through the filter.
    """
    for conditions in cases:
        if all(event_dict.get(key) in values for key, values in conditions):
            return event_dict
    raise structlog.DropEvent


def filter_all_but_warnings_and_errors(_, __, event_dict):
    """Filter every log message that is not a warning or an error."""
    return filter_cases(_, _, event_dict, cases=[[("level", ["warning", "error"])]])


def filter_all_but_info_warnings_and_errors(_, __, event_dict):
    """Filter every log message that is not an info, a warning or an error.

    Per-step events are logged with ``cl="trace"`` and are therefore dropped by this
    filter.
    """
    return filter_cases(_, _, event_dict, cases=[[("level", ["info", "warning", "error"])]])


def filter_all(_, __, event_dict):
    """Filter every log message."""
    raise structlog.DropEvent


#####################
# Loggers & Functions
#####################


def custom_add_log_level(logger, method_name, event_dict):
    """Set the `level` key, using the custom level `cl` when one was given."""
    custom_log_level = event_dict.pop("cl", None)
    if custom_log_level is None:
        custom_log_level = {"warn": "warning", "exception": "error"}.get(method_name, method_name)
    event_dict["level"] = custom_log_level
    return event_dict


def _console_renderer():
    def format_timestamp(obj):
        return str(obj[:-4])

    def format_on_type(obj):
        if isinstance(obj, bool):
            return " ( " + str(obj) + " ) "
        if isinstance(obj, int):
            return " | " + str(obj) + " | "
        if isinstance(obj, float):
            return " " + f"{obj:.6g}"
        return " " + str(obj)

    return structlog.dev.ConsoleRenderer(
        colors=True,
        columns=[
            structlog.dev.Column(
                "timestamp",
                structlog.dev.KeyValueColumnFormatter(
                    key_style=None,
                    value_style=colorama.Style.BRIGHT + colorama.Fore.BLACK,
                    reset_style=colorama.Style.RESET_ALL,
                    value_repr=format_timestamp,
                ),
            ),
            structlog.dev.Column(
                "level",
                structlog.dev.LogLevelColumnFormatter(
                    level_styles={
                        key: colorama.Style.BRIGHT + level
                        for key, level in structlog.dev.ConsoleRenderer.get_default_level_styles().items()
                    },
                    reset_style=colorama.Style.BRIGHT + colorama.Style.RESET_ALL,
                    width=None,
                ),
            ),
            structlog.dev.Column(
                "module",
                structlog.dev.KeyValueColumnFormatter(
                    key_style=None,
                    value_style=colorama.Fore.YELLOW,
                    reset_style=colorama.Style.RESET_ALL,
                    value_repr=str,
                    width=12,
                ),
            ),
            structlog.dev.Column(
                "event",
                structlog.dev.KeyValueColumnFormatter(
                    key_style=None,
                    value_style=colorama.Style.BRIGHT + colorama.Fore.WHITE,
                    reset_style=colorama.Style.RESET_ALL,
                    value_repr=str,
                    width=28,
                ),
            ),
            structlog.dev.Column(
                "",
                structlog.dev.KeyValueColumnFormatter(
                    key_style=colorama.Fore.MAGENTA,
                    value_style=colorama.Style.BRIGHT + colorama.Fore.CYAN,
                    reset_style=colorama.Style.RESET_ALL,
                    value_repr=format_on_type,
                ),
            ),
        ],
    )


class TerminalLogger(structlog.BoundLogger):
    """Singleton class of structlog.BoundLogger, used to configure / initialize once the
    terminal logger for the whole process."""

    def __new__(cls, filters=None):
        if not hasattr(cls, "instance"):
            if filters is None:
                filters = [filter_all_but_info_warnings_and_errors]
            processors = (
                [
                    structlog.processors.TimeStamper(fmt="%H:%M:%S.%f"),
                    custom_add_log_level,
                ]
                + filters
                + [_console_renderer()]
            )
            cls.instance = structlog.wrap_logger(
                structlog.PrintLogger(file=sys.stderr),
                processors=processors,
                wrapper_class=structlog.stdlib.BoundLogger,
            )
        return cls.instance

    @classmethod
    def reset(cls):
        """Forget the singleton instance so that the next call reconfigures it."""
        if hasattr(cls, "instance"):
            del cls.instance


class FileLogger(structlog.BoundLogger):
    """Singleton class of structlog.BoundLogger, used to configure / initialize once the
    file logger of the current run. Each line of the log file is a JSON object.

    Until `configurate_logger` is called with a path, the file logger drops every event.
    """

    def __new__(cls, filters=None, log_path=None):
        if not hasattr(cls, "instance"):
            if log_path is None:
                filters = [filter_all]
                file = open(os.devnull, "w", encoding="utf-8")
            else:
                Path(log_path).parent.mkdir(parents=True, exist_ok=True)
                file = Path(log_path).open("at", encoding="utf-8")
            cls.instance = structlog.wrap_logger(
                structlog.WriteLogger(file=file),
                processors=[
                    custom_add_log_level,
                    structlog.processors.TimeStamper(fmt="iso"),
                ]
                + (filters or [])
                + [
                    structlog.processors.ExceptionRenderer(),
                    structlog.processors.JSONRenderer(),
                ],
                wrapper_class=structlog.stdlib.BoundLogger,
            )
            cls.file = file
            cls.instance.info("init file logger")
        return cls.instance

    @classmethod
    def reset(cls):
        """Close the current log file and forget the singleton instance."""
        if hasattr(cls, "instance"):
            cls.file.close()
            del cls.instance


def configurate_logger(
    log_path=None,
    filters=None,
    filters_terminal=None,
    filters_file=None,
):
    """Configure the terminal and file loggers of the current process.

    Calling this function again (for example between two runs of an ablation) closes the
    previous log file and re-creates both singletons.

    Args:
        log_path (str): path of the JSON-lines log file, usually ``<run-dir>/logs.log``.
            When None, the file logger drops everything.
        filters (list): filters applied to both loggers, overriding the specific ones.
        filters_terminal (list): filters of the terminal logger.
        filters_file (list): filters of the file logger.

    Returns:
        tuple: the terminal logger and the file logger.
    """
    TerminalLogger.reset()
    FileLogger.reset()
    terminal_logger = TerminalLogger(filters=filters if filters is not None else filters_terminal)
    file_logger = FileLogger(log_path=log_path, filters=filters if filters is not None else filters_file)
    return terminal_logger, file_logger


def log_exception(component, exception):
    """Log the encountered exception to both loggers of the component in a unified way.

    Args:
        component (AbstractComponent): the component that encountered the exception.
        exception (Exception): the encountered exception.
    """
    component.terminal_logger.exception("The component encountered the following exception :", error=str(exception))
    component.file_logger.exception("The component encountered the following exception :", error=str(exception))


###########
# Plot logs
###########


def extract_number(string):
    """extract the trailing number of the string (file suffix excluded).

    Args:
        string (str): string to analyze.

    Returns:
        tuple[int,str]: the extracted number (-1 if none) and the string, usable as a sort key.
    """
    s = re.findall(r"(\d+)(?:\.\w+)?$", str(string))
    return (int(s[0]) if s else -1, str(string))


def read_metrics(metrics_path):
    """Read a metrics CSV written by the trainer into a dict of numpy columns."""
    with open(metrics_path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {key: np.array([float(r[key]) for r in rows]) for key in rows[0]}


def plot_metrics(metrics_path, plot_saving_path):
    """Create the training-curve figure of a run: loss terms and the collapse sentinel
    `feature_std` against the optimisation step.

    Args:
        metrics_path (str): path to the metrics CSV of the run.
        plot_saving_path (str): folder where the figure is saved.

    Returns:
        str: path of the saved figure.
    """
    metrics_path = Path(metrics_path)
    if not metrics_path.is_file():
        raise FileNotFoundError(f"metrics CSV not found, expected {metrics_path}")
    metrics = read_metrics(metrics_path)
    Path(plot_saving_path).mkdir(parents=True, exist_ok=True)

    fig, (ax_loss, ax_std) = plt.subplots(1, 2, figsize=(10, 4))
    if metrics:
        for key, color in (("total", "black"), ("sim2", "tab:blue"), ("sim1_kl", "tab:orange")):
            ax_loss.plot(metrics["step"], metrics[key], color=color, label=key, linewidth=1)
        ax_std.plot(metrics["step"], metrics["feature_std"], color="tab:green", linewidth=1)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("symlog", linthresh=1e-3)
    ax_loss.legend(fontsize="7")
    ax_loss.grid(True)
    ax_std.axhline(0.01, color="tab:red", linestyle="--", linewidth=0.8)
    ax_std.set_xlabel("step")
    ax_std.set_ylabel("feature_std")
    ax_std.grid(True)

    plot_filename = str(Path(plot_saving_path) / "training_curves.png")
    plt.savefig(plot_filename, dpi=200, bbox_inches="tight")
    plt.close(fig)
    return plot_filename


def plot_mask_strips(masks_path, plot_saving_path, fractions=(0.25, 0.75, 1.0)):
    """Create one strip figure per sequence from a directory of predicted masks: the
    reference mask followed by the predictions at the given fractions of the sequence.

    Args:
        masks_path (str): folder with one sub-folder of ``frame_%06d.png`` label maps per
            sequence.
        plot_saving_path (str): folder where the figures are saved.
        fractions (tuple[float]): positions in the sequence shown after the reference.

    Returns:
        list[str]: paths of the saved figures.
    """
    from PIL import Image

    masks_path = Path(masks_path)
    if not masks_path.is_dir():
        raise FileNotFoundError(f"mask directory not found, expected {masks_path}")
    Path(plot_saving_path).mkdir(parents=True, exist_ok=True)
    saved = []
    for sequence in sorted(p for p in masks_path.iterdir() if p.is_dir()):
        files = sorted(sequence.glob("frame_*.png"), key=extract_number)
        if not files:
            continue
        picks = [0] + [max(0, min(len(files) - 1, round(f * (len(files) - 1)))) for f in fractions]
        titles = ["Ref"] + [f"{round(f * 100)}%" for f in fractions]
        masks = [np.asarray(Image.open(files[i])) for i in picks]
        vmax = max(1, max(int(m.max()) for m in masks))
        fig, axes = plt.subplots(1, len(picks), figsize=(2.2 * len(picks), 2.4))
        for ax, mask, title in zip(axes, masks, titles):
            ax.imshow(mask, cmap="tab10", vmin=0, vmax=max(vmax, 9), interpolation="nearest")
            ax.set_title(title, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.suptitle(sequence.name, fontsize=9)
        plot_filename = str(Path(plot_saving_path) / f"strip_{sequence.name}.png")
        plt.savefig(plot_filename, dpi=150, bbox_inches="tight")
        plt.close(fig)
        saved.append(plot_filename)
    return saved
