import json

import numpy as np
import pytest

from residiff.ablation import (
    VARIANT_ORDER,
    AblationSpec,
    enabled_components,
    variant_config,
    inference_cost,
)
from residiff.cli import main
from residiff.config import RunConfig, apply_overrides, load_config, save_config
from residiff.data import load_volume
from residiff.errors import ConfigurationError, ParameterError
from residiff.pipeline import build_model


class TestRunConfig:
    def test_defaults_are_valid(self):
        cfg = RunConfig()
        assert cfg.train.iterations == 20000
        assert cfg.train.batch_size == 4
        assert cfg.train.learning_rate == 1e-4
        assert cfg.train.n_negatives == 10
        assert (cfg.losses.m, cfg.losses.n, cfg.losses.k) == (1.0, 1.0, 5e-5)
        assert cfg.schedule.steps == 2000
        assert cfg.sample.n_inference_steps == 10
        assert cfg.guidance.n_neighbors == 4
        assert cfg.guidance.pyramid_levels == 3

    def test_dict_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_yaml_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown configuration sections"):
            RunConfig.from_dict({"optimizer": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown keys"):
            RunConfig.from_dict({"train": {"iters": 5}})

    def test_cross_section_validation(self):
        with pytest.raises(ConfigurationError, match="n_inference_steps"):
            RunConfig.from_dict({"schedule": {"steps": 5}, "sample": {"n_inference_steps": 6}})
        with pytest.raises(ConfigurationError, match="pyramid_levels"):
            RunConfig.from_dict({"guidance": {"pyramid_levels": 2}})
        with pytest.raises(ConfigurationError, match="cpm_base_channels"):
            RunConfig.from_dict(
                {"networks": {"cpm_base_channels": 8, "denoiser_base_channels": 8}}
            )

    def test_overrides(self):
        cfg = apply_overrides(RunConfig(), ["train.iterations=123", "losses.k=0.0"])
        assert cfg.train.iterations == 123
        assert cfg.losses.k == 0.0

    def test_override_path_validation(self):
        with pytest.raises(ConfigurationError):
            apply_overrides(RunConfig(), ["iterations=5"])
        with pytest.raises(ConfigurationError):
            apply_overrides(RunConfig(), ["nosection.key=5"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "none.yaml")


class TestAblationVariants:
    def test_chain_is_strict_supersets(self):
        chain = [enabled_components(v) for v in VARIANT_ORDER[1:]]
        for smaller, larger in zip(chain, chain[1:]):
            assert smaller < larger

    def test_unknown_variant_rejected(self):
        with pytest.raises(ParameterError):
            AblationSpec(variant="plus_everything")

    def test_baseline_gets_full_size_denoiser(self, tiny_config):
        cfg = variant_config(tiny_config, "baseline_direct")
        assert cfg.networks.denoiser_base_channels == tiny_config.networks.cpm_base_channels
        assert not cfg.model.use_cpm

    def test_cost_ordering_baseline_vs_cpm_irm(self, tiny_config):
        base = build_model(variant_config(tiny_config, "baseline_direct"))
        pair = build_model(variant_config(tiny_config, "cpm_irm"))
        hw = (16, 16)
        cost_base = inference_cost(base, variant_config(tiny_config, "baseline_direct"), hw, 4)
        cost_pair = inference_cost(pair, variant_config(tiny_config, "cpm_irm"), hw, 4)
        assert cost_pair["params_denoiser"] < cost_base["params_denoiser"]
        assert cost_pair["macs_per_slice"] < cost_base["macs_per_slice"]


def _tiny_overrides():
    return [
        "--set", "networks.cpm_base_channels=8",
        "--set", "networks.denoiser_base_channels=4",
        "--set", "networks.channel_multipliers=[1,2]",
        "--set", "networks.gamma_embedding_dim=8",
        "--set", "networks.aux_width=4",
        "--set", "guidance.n_neighbors=2",
        "--set", "guidance.pyramid_levels=2",
        "--set", "schedule.steps=12",
        "--set", "sample.n_inference_steps=3",
        "--set", "train.n_negatives=2",
        "--set", "train.batch_size=2",
        "--set", "train.checkpoint_every=3",
        "--set", "train.eval_every=3",
    ]


class TestCli:
    def test_gen_data_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "data"
        code = main([
            "gen-data", "--out-dir", str(out), "--n-subjects", "4",
            "--size", "16", "16", "16", "--drf", "20", "--seed", "7",
        ])
        assert code == 0
        assert (out / "manifest.json").exists()
        assert len(list(out.glob("*.pvol"))) == 8
        assert "4 paired volumes" in capsys.readouterr().out

    def test_gen_data_is_reproducible(self, tmp_path):
        for sub in ("a", "b"):
            main([
                "gen-data", "--out-dir", str(tmp_path / sub), "--n-subjects", "2",
                "--size", "16", "16", "16", "--drf", "10", "--seed", "3",
            ])
        for name in ("manifest.json", "subj-000_lpet.pvol"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_gen_data_refuses_overwrite(self, tmp_path):
        out = tmp_path / "data"
        args = [
            "gen-data", "--out-dir", str(out), "--n-subjects", "1",
            "--size", "16", "16", "16", "--seed", "1",
        ]
        assert main(args) == 0
        assert main(args) == 3  # data error exit code
        assert main(args + ["--force"]) == 0

    def test_random_seed_printed_when_omitted(self, tmp_path, capsys):
        main([
            "gen-data", "--out-dir", str(tmp_path / "d"), "--n-subjects", "1",
            "--size", "16", "16", "16",
        ])
        assert "seed:" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path):
        code = main([
            "train", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path / "run"),
            "--seed", "0", "--set", "train.iterations=0",
        ])
        assert code == 2

    def test_exit_code_families(self):
        from residiff.errors import (
            ConfigurationError,
            DataError,
            FormatError,
            ParameterError,
            ShapeError,
            TrainingError,
        )

        assert ConfigurationError("x").exit_code == 2
        assert ParameterError("x").exit_code == 2
        assert ShapeError("x").exit_code == 2
        assert DataError("x").exit_code == 3
        assert FormatError("x").exit_code == 3
        assert TrainingError("x").exit_code == 4

    def test_reconstruct_rejects_non_divisible_volume(self, cli_dataset, tmp_path, capsys):
        run_dir = tmp_path / "run"
        main([
            "train", "--data-dir", str(cli_dataset), "--out-dir", str(run_dir),
            "--seed", "0", "--iterations", "2", *_tiny_overrides(),
        ])
        from residiff.data import VolumeMeta, save_volume

        bad = tmp_path / "bad_lpet.pvol"
        save_volume(bad, np.zeros((4, 10, 10), dtype=np.float32), VolumeMeta("bad"))
        code = main([
            "reconstruct", "--checkpoint", str(run_dir / "checkpoint-final.pt"),
            "--input", str(bad), "--seed", "0",
        ])
        assert code == 2  # shape errors are configuration-family
        assert "divisible" in capsys.readouterr().err

    @pytest.fixture()
    def cli_dataset(self, tmp_path):
        out = tmp_path / "data"
        main([
            "gen-data", "--out-dir", str(out), "--n-subjects", "6",
            "--size", "16", "16", "16", "--drf", "20", "--seed", "5",
            "--eval-fraction", "0.34",
        ])
        return out

    def test_full_cli_workflow(self, cli_dataset, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code = main([
            "train", "--data-dir", str(cli_dataset), "--out-dir", str(run_dir),
            "--seed", "0", "--iterations", "4", *_tiny_overrides(),
        ])
        assert code == 0
        ckpt = run_dir / "checkpoint-final.pt"
        assert ckpt.exists()
        metrics = [json.loads(l) for l in open(run_dir / "metrics.jsonl")]
        assert [m["step"] for m in metrics] == [1, 2, 3, 4]
        capsys.readouterr()

        lpet_path = cli_dataset / "subj-003_lpet.pvol"
        code = main([
            "reconstruct", "--checkpoint", str(ckpt), "--input", str(lpet_path),
            "--ams", "2", "--seed", "1", "--out-dir", str(tmp_path / "recon"),
        ])
        assert code == 0
        rpet_path = tmp_path / "recon" / "subj-003.rpet.pvol"
        sd_path = tmp_path / "recon" / "subj-003.sd.pvol"
        assert rpet_path.exists() and sd_path.exists()
        sd_vol, sd_meta = load_volume(sd_path)
        assert sd_meta.kind == "sd"
        assert sd_vol.max() > 0  # two samples averaged -> nonzero spread
        capsys.readouterr()

        code = main([
            "evaluate", "--pred-dir", str(tmp_path / "recon"),
            "--target-dir", str(cli_dataset),
        ])
        assert code == 0
        table = capsys.readouterr().out
        assert "subj-003" in table and "MEAN" in table and "lpet" in table
        rows = [json.loads(l) for l in open(tmp_path / "recon" / "evaluation.jsonl")]
        kinds = {r["kind"] for r in rows}
        assert kinds == {"rpet", "lpet"}
        rpet_rows = [r for r in rows if r["kind"] == "rpet" and r["subject"] != "MEAN"]
        assert all("sd" in r and r["sd"] > 0 for r in rpet_rows)

    def test_weight_flag_disables_contrastive_term(self, cli_dataset, tmp_path):
        run_dir = tmp_path / "run"
        code = main([
            "train", "--data-dir", str(cli_dataset), "--out-dir", str(run_dir),
            "--seed", "0", "--iterations", "3", "--weights.k", "0", *_tiny_overrides(),
        ])
        assert code == 0
        records = [json.loads(l) for l in open(run_dir / "metrics.jsonl")]
        assert all(r["loss_contrastive"] == 0.0 for r in records)

    def test_reconstruct_deterministic_across_runs(self, cli_dataset, tmp_path):
        run_dir = tmp_path / "run"
        main([
            "train", "--data-dir", str(cli_dataset), "--out-dir", str(run_dir),
            "--seed", "0", "--iterations", "3", *_tiny_overrides(),
        ])
        ckpt = run_dir / "checkpoint-final.pt"
        lpet_path = cli_dataset / "subj-000_lpet.pvol"
        outs = []
        for sub in ("r1", "r2"):
            main([
                "reconstruct", "--checkpoint", str(ckpt), "--input", str(lpet_path),
                "--seed", "9", "--out-dir", str(tmp_path / sub),
            ])
            outs.append((tmp_path / sub / "subj-000.rpet.pvol").read_bytes())
        assert outs[0] == outs[1]

    def test_evaluate_self_is_sentinel(self, cli_dataset, tmp_path, capsys):
        # feed a target volume as its own prediction: PSNR sentinel inf, SSIM 1, NMSE 0
        pred_dir = tmp_path / "self"
        pred_dir.mkdir()
        spet, meta = load_volume(cli_dataset / "subj-000_spet.pvol")
        from residiff.data import save_volume

        save_volume(pred_dir / "subj-000.rpet.pvol", spet, meta)
        assert main([
            "evaluate", "--pred-dir", str(pred_dir), "--target-dir", str(cli_dataset),
        ]) == 0
        out = capsys.readouterr().out
        line = [l for l in out.splitlines() if l.startswith("subj-000") and "rpet" in l][0]
        assert "inf" in line and "1.0000" in line and "0.0000" in line

    def test_ablate_tiny_budget(self, cli_dataset, tmp_path, capsys):
        code = main([
            "ablate", "--data-dir", str(cli_dataset), "--out-dir", str(tmp_path / "abl"),
            "--seed", "0", "--iterations", "2", "--ams", "2",
            "--variants", "cpm_only,cpm_irm",
            "--max-eval-subjects", "1", *_tiny_overrides(),
        ])
        assert code == 0
        table = capsys.readouterr().out
        assert "cpm_only" in table and "cpm_irm" in table
        rows = [json.loads(l) for l in open(tmp_path / "abl" / "ablation.jsonl")]
        by_name = {r["variant"]: r for r in rows}
        # the coarse-only model has no denoiser at all
        assert by_name["cpm_only"]["mparam_denoiser"] == 0.0
        assert by_name["cpm_irm"]["mparam_denoiser"] > 0.0
        assert "ams_sd" in by_name["cpm_irm"]
