import csv
import hashlib
import json

import pytest

from phinet_core.abstract import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE
from phinet_core.cli import ablation_jobs, build_parser, main, resolve_configs
from phinet_core.config import LossFlags, model_preset, train_preset
from phinet_core.videodata import ShapeSpec, SyntheticVideoSpec, generate_video, write_dataset

MICRO = ["--model", "micro", "--k-min", "1", "--k-max", "4", "--batch-size", "4"]


def _digest(folder):
    digest = hashlib.sha256()
    for path in sorted(folder.rglob("*.png")):
        digest.update(str(path.relative_to(folder)).encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture
def micro_data(tmp_path):
    out = tmp_path / "data"
    code = main(["gen-data", "--run-dir", str(tmp_path / "gen"), "--out", str(out), "--n-videos", "4", "--frames", "12", "--image-size", "8"])
    assert code == EXIT_OK
    return out


@pytest.fixture
def trained_run(tmp_path, micro_data):
    run_dir = tmp_path / "run"
    code = main(["train", "--run-dir", str(run_dir), "--data", str(micro_data), "--epochs", "2", *MICRO])
    assert code == EXIT_OK
    return run_dir


def test_gen_data_is_deterministic(tmp_path):
    common = ["--n-videos", "2", "--frames", "4", "--image-size", "8", "--seed", "3"]
    assert main(["gen-data", "--run-dir", str(tmp_path / "a"), *common]) == EXIT_OK
    assert main(["gen-data", "--run-dir", str(tmp_path / "b"), *common]) == EXIT_OK
    assert _digest(tmp_path / "a" / "data") == _digest(tmp_path / "b" / "data")
    assert (tmp_path / "a" / "data" / "video_0001" / "masks" / "frame_000003.png").is_file()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["exit_code"] == 0 and manifest["seed"] == 3


def test_gen_data_refuses_to_overwrite(tmp_path, micro_data):
    args = ["gen-data", "--run-dir", str(tmp_path / "gen"), "--out", str(micro_data), "--image-size", "8", "--frames", "4"]
    assert main(args) == EXIT_USAGE
    assert main([*args, "--force"]) == EXIT_OK


def test_gen_data_rejects_single_frame_videos(tmp_path):
    assert main(["gen-data", "--run-dir", str(tmp_path), "--frames", "1"]) == EXIT_USAGE


def test_train_writes_a_run_directory(trained_run):
    assert sorted(p.name for p in (trained_run / "checkpoints").iterdir()) == ["epoch_0001.ckpt", "epoch_0002.ckpt"]
    assert (trained_run / "config.resolved").is_file()
    assert (trained_run / "logs.log").is_file()
    with open(trained_run / "metrics.csv", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    manifest = json.loads((trained_run / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["exit_code"] == 0
    assert len(manifest["config_sha256"]) == 64
    assert manifest["command"].startswith("train --run-dir ")
    assert "--epochs 2" in manifest["command"]


def test_resolve_paper_preset():
    args = build_parser().parse_args(["train", "--preset", "paper"])
    model_cfg, train_cfg, eval_params = resolve_configs(args)
    assert model_cfg == model_preset("paper")
    assert train_cfg == train_preset("paper")
    assert (eval_params.top_k, eval_params.radius, eval_params.queue) == (7, 30, 30)
    assert (model_cfg.image_size, model_cfg.patch_size, model_cfg.d, model_cfg.depth, model_cfg.heads) == (224, 16, 384, 12, 6)
    assert (model_cfg.m, model_cfg.c) == (32, 32)
    assert train_cfg.lr == 1.5e-4
    assert (train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.weight_decay) == (0.9, 0.95, 0.05)
    assert (train_cfg.warmup_epochs, train_cfg.total_epochs, train_cfg.batch_size) == (40, 400, 768)
    assert (train_cfg.beta, train_cfg.alpha, train_cfg.gamma, train_cfg.sigma_eps) == (0.01, 0.8, 0.99, 0.5)
    assert (train_cfg.k_min, train_cfg.k_max, train_cfg.repeated_sampling) == (4, 48, 2)
    assert train_cfg.ema_cadence.value == "per_epoch"


def test_full_is_an_alias_of_paper():
    paper = resolve_configs(build_parser().parse_args(["train", "--preset", "paper"]))
    full = resolve_configs(build_parser().parse_args(["train", "--preset", "full"]))
    assert paper == full


def test_train_accepts_the_paper_preset(tmp_path, micro_data):
    args = ["train", "--run-dir", str(tmp_path / "paper"), "--preset", "paper", "--model", "micro"]
    args += ["--data", str(micro_data), "--epochs", "0", "--k-min", "1", "--k-max", "4"]
    assert main(args) == EXIT_OK
    assert (tmp_path / "paper" / "checkpoints" / "epoch_0000.ckpt").is_file()


def test_resolve_flags_and_protocol():
    args = build_parser().parse_args(
        ["ablate", "--sg", "post", "--no-h", "--g", "linear", "--protocol", "vip", "--top-k", "3", "--epochs", "2"]
    )
    _, train_cfg, eval_params = resolve_configs(args)
    flags = train_cfg.flags
    assert (flags.sg_prior, flags.sg_post, flags.use_h, flags.g_kind.value) == (False, True, False, "linear")
    assert (eval_params.top_k, eval_params.radius, eval_params.queue) == (3, 5, 3)
    assert train_cfg.total_epochs == 2 and train_cfg.warmup_epochs == 2


def test_usage_errors(tmp_path):
    assert main(["train", "--run-dir", str(tmp_path), "--g", "bogus"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["plot", "--run-dir", str(tmp_path)]) == EXIT_USAGE


def test_eval_without_checkpoint(tmp_path):
    assert main(["eval", "--run-dir", str(tmp_path / "empty")]) == EXIT_IO
    assert main(["eval", "--run-dir", str(tmp_path), "--checkpoint", str(tmp_path / "nowhere.ckpt")]) == EXIT_IO


def test_eval_on_static_videos_is_perfect(tmp_path, trained_run, capsys):
    assert main(["eval", "--run-dir", str(trained_run), "--static"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "J&F_m 1.0000" in out and "feature_std" in out and "effective_rank" in out
    assert (trained_run / "eval" / "scores.csv").is_file()


def test_eval_on_a_dataset_directory(tmp_path, trained_run, capsys):
    square = ShapeSpec(kind="square", size=2.0, position=(1.5, 1.5))
    video = generate_video(SyntheticVideoSpec(n_frames=4, image_size=8, shapes=(square,), video_id="square"))
    write_dataset([video], tmp_path / "static")
    out = tmp_path / "eval"
    code = main(["eval", "--run-dir", str(trained_run), "--data", str(tmp_path / "static"), "--use-ema", "--out", str(out)])
    assert code == EXIT_OK
    assert "J_m 1.0000  F_m 1.0000" in capsys.readouterr().out
    assert (out / "masks" / "square" / "frame_000003.png").is_file()


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--run-dir", str(tmp_path / "ok")]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out
    assert main(["gradcheck", "--run-dir", str(tmp_path / "bad"), "--inject-fault", "sim2"]) == EXIT_NUMERICAL
    assert "objective.sim2" in capsys.readouterr().out


def test_plot_command(tmp_path, trained_run):
    assert main(["plot", "--run-dir", str(tmp_path / "p"), "--metrics", str(tmp_path / "missing.csv")]) == EXIT_IO
    assert main(["plot", "--run-dir", str(tmp_path / "p"), "--metrics", str(trained_run / "metrics.csv")]) == EXIT_OK
    assert (tmp_path / "p" / "figures" / "training_curves.png").is_file()


def test_ablate_selected_rows(tmp_path, micro_data):
    run_dir = tmp_path / "ablate"
    code = main(
        ["ablate", "--run-dir", str(run_dir), "--data", str(micro_data), "--epochs", "1", "--rows", "proposed,no-ema", *MICRO]
    )
    assert code == EXIT_OK
    with open(run_dir / "ablation.csv", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    assert "feature_std" in reader.fieldnames and "effective_rank" in reader.fieldnames
    assert [r["row"] for r in rows] == ["no-ema", "proposed"]
    assert all(r["status"] == "ok" for r in rows)
    assert all(float(r["feature_std"]) >= 0.0 and float(r["effective_rank"]) >= 0.0 for r in rows)
    assert (run_dir / "proposed_seed0" / "checkpoints" / "epoch_0001.ckpt").is_file()
    assert (run_dir / "ablation.txt").read_text(encoding="utf-8").startswith("row")
    for name in ("proposed_seed0", "no-ema_seed0"):
        manifest = json.loads((run_dir / name / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["exit_code"] == 0 and manifest["seed"] == 0
        assert manifest["command"].startswith("ablate") and name in manifest["command"]
        assert len(manifest["config_sha256"]) == 64
        assert any(a.endswith("scores.csv") for a in manifest["artifacts"])
    no_ema = json.loads((run_dir / "no-ema_seed0" / "manifest.json").read_text(encoding="utf-8"))
    assert "use_ema_target = False" in no_ema["config"]


def test_ablate_beta_sweep(tmp_path, micro_data):
    run_dir = tmp_path / "sweep"
    code = main(["ablate", "--run-dir", str(run_dir), "--data", str(micro_data), "--epochs", "1", "--sweep", "beta", *MICRO])
    assert code == EXIT_OK
    with open(run_dir / "ablation.csv", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["row"] for r in rows] == ["beta=0.001", "beta=0.01", "beta=0.03"]
    assert all(r["status"] == "ok" for r in rows)
    manifest = json.loads((run_dir / "beta=0.03_seed0" / "manifest.json").read_text(encoding="utf-8"))
    assert "beta = 0.03" in manifest["config"]


def test_sweep_and_rows_are_exclusive(tmp_path):
    assert main(["ablate", "--run-dir", str(tmp_path), "--sweep", "noise", "--rows", "proposed"]) == EXIT_USAGE


def test_sweep_jobs():
    args = build_parser().parse_args(["ablate", "--sweep", "batch", "--seeds", "0,1"])
    jobs = ablation_jobs(args)
    assert [job.run_name for job in jobs][:2] == ["batch_size=192_seed0", "batch_size=192_seed1"]
    assert [dict(job.overrides)["batch_size"] for job in jobs[::2]] == [192, 384, 768, 1536]
    assert all(job.flags == LossFlags() for job in jobs)
    noise = ablation_jobs(build_parser().parse_args(["ablate", "--sweep", "noise"]))
    assert [dict(job.overrides)["sigma_eps"] for job in noise] == [0.0, 0.1, 0.5, 1.0]


def test_unknown_ablation_row(tmp_path):
    assert main(["ablate", "--run-dir", str(tmp_path), "--rows", "bogus"]) == EXIT_USAGE


def test_help_lists_the_ablation_flags(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--no-symmetric", "--no-h", "--g", "--no-noise", "--no-ema", "--sg", "--k-min", "--preset"):
        assert flag in text
