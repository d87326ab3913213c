import csv

import numpy as np
import pytest

from mimdeep.checkpoint import load_checkpoint, save_checkpoint
from mimdeep.cli import main
from mimdeep.config import (
    ConfigError,
    build_model_config,
    build_target_specs,
    build_train_config,
    parse_config,
)
from mimdeep.data import (
    generate_synthetic,
    load_dataset,
    read_ppm,
    save_dataset,
    write_ppm,
)
from mimdeep.model import ModelConfig, init_params
from mimdeep.training import new_opt_state


@pytest.fixture
def rng():
    return np.random.default_rng(55)


class TestPpm:
    def test_round_trip_bitwise(self, tmp_path, rng):
        # quantize to the byte grid first so the trip is exact
        img = np.floor(rng.random((3, 8, 8)).astype(np.float32) * 255 + 0.5) / 255.0
        path = str(tmp_path / "x.ppm")
        write_ppm(img.astype(np.float32), path)
        np.testing.assert_array_equal(read_ppm(path), img.astype(np.float32))

    def test_known_bytes(self, tmp_path):
        img = np.zeros((3, 1, 2), dtype=np.float32)
        img[0, 0, 0] = 1.0   # first pixel pure red
        img[2, 0, 1] = 0.5   # second pixel half blue: 0.5*255+0.5 -> 128
        path = tmp_path / "k.ppm"
        write_ppm(img, str(path))
        assert path.read_bytes() == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 128])

    def test_header_comments_and_whitespace(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6 # comment\n# another\n 2 1\n255\n" + bytes(6))
        assert read_ppm(str(path)).shape == (3, 1, 2)

    def test_maxval_rejected(self, tmp_path):
        path = tmp_path / "m.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(IOError, match="maxval"):
            read_ppm(str(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "b.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0")
        with pytest.raises(IOError, match="P6"):
            read_ppm(str(path))

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(IOError, match="pixel bytes"):
            read_ppm(str(path))

    def test_clamping(self, tmp_path):
        img = np.array([[[2.0]], [[-1.0]], [[0.0]]], dtype=np.float32)
        path = tmp_path / "cl.ppm"
        write_ppm(img, str(path))
        assert path.read_bytes()[-3:] == bytes([255, 0, 0])


class TestDataset:
    def test_generate_deterministic(self):
        a = generate_synthetic(8, 16, 4, seed=2)
        b = generate_synthetic(8, 16, 4, seed=2)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_round_robin_labels(self):
        ds = generate_synthetic(8, 16, 4, seed=0)
        np.testing.assert_array_equal(ds.labels, [0, 1, 2, 3, 0, 1, 2, 3])

    def test_images_in_range(self):
        ds = generate_synthetic(4, 16, 2, seed=0)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.images.dtype == np.float32

    def test_save_load_bitwise(self, tmp_path):
        ds = generate_synthetic(6, 16, 3, seed=1)
        save_dataset(ds, str(tmp_path))
        back = load_dataset(str(tmp_path))
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=16, depth=2,
                          num_heads=2, decoder_dim=8, decoder_depth=1,
                          tap_indices=(1,), mask_ratio=0.6, shared_decoder=True)
        params = init_params(cfg, seed=7)
        opt = new_opt_state()
        opt["t"] = 42
        opt["m"] = {k: rng.standard_normal(t.data.shape).astype(np.float32)
                    for k, t in params.items()}
        opt["v"] = {k: rng.random(t.data.shape).astype(np.float32)
                    for k, t in params.items()}
        path = str(tmp_path / "c.dmim")
        save_checkpoint(path, cfg, params, opt, seed=9, step=123)
        back = load_checkpoint(path)
        assert back.config == cfg
        assert back.seed == 9 and back.step == 123
        assert back.opt_state["t"] == 42
        for name in params:
            np.testing.assert_array_equal(back.params[name].data, params[name].data)
            np.testing.assert_array_equal(back.opt_state["m"][name], opt["m"][name])
            np.testing.assert_array_equal(back.opt_state["v"][name], opt["v"][name])

    def test_without_optimizer(self, tmp_path):
        cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=16, depth=2,
                          num_heads=2, tap_indices=(1,))
        path = str(tmp_path / "c.dmim")
        save_checkpoint(path, cfg, init_params(cfg, 0))
        assert load_checkpoint(path).opt_state is None

    def test_magic(self, tmp_path):
        path = tmp_path / "c.dmim"
        cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=16, depth=2,
                          num_heads=2, tap_indices=(1,))
        save_checkpoint(str(path), cfg, init_params(cfg, 0))
        assert path.read_bytes()[:4] == b"DMIM"
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(IOError, match="magic"):
            load_checkpoint(str(path))


class TestConfigFile:
    def test_parse_and_build(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# pretraining setup\n"
            "depth = 4\n"
            "embed_dim = 32  # inline comment\n"
            "tap_indices = 2,3\n"
            "epochs = 3\n"
            "batch_size = 16\n"
        )
        cfg = parse_config(str(path))
        mc = build_model_config(cfg)
        assert mc.depth == 4 and mc.tap_indices == (2, 3)
        tc = build_train_config(cfg)
        assert tc.epochs == 3 and tc.batch_size == 16

    def test_unknown_key_names_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("depth = 4\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError, match=r":2: unknown key 'learning_rate'"):
            parse_config(str(path))

    def test_duplicate_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("depth = 4\ndepth = 8\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(str(path))

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("depth 4\n")
        with pytest.raises(ConfigError, match=":1:"):
            parse_config(str(path))

    def test_baseline_mode_clears_taps(self):
        mc = build_model_config({"mode": "baseline_mae", "depth": "4"})
        assert mc.tap_indices == ()

    def test_alpha_schedule_auto_hybrid(self):
        mc = build_model_config({"depth": "4"})  # taps (2,3)
        specs = build_target_specs({"mode": "deepmim_hybrid"}, mc)
        assert [specs[d].alpha for d in ("tap2", "tap3", "final")] == [0.0, 0.5, 1.0]

    def test_alpha_schedule_length_check(self):
        mc = build_model_config({"depth": "4"})
        with pytest.raises(ConfigError, match="entries"):
            build_target_specs({"alpha_schedule": "0.5,1.0"}, mc)

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            build_model_config({"depth": "twelve"})
        with pytest.raises(ConfigError):
            build_model_config({"shared_decoder": "yes"})


CLI_CFG = """
image_size = 16
patch_size = 4
embed_dim = 16
depth = 2
num_heads = 2
decoder_dim = 8
decoder_depth = 1
tap_indices = 1
epochs = 2
batch_size = 8
base_lr = 0.001
"""


class TestCli:
    @pytest.fixture
    def workspace(self, tmp_path):
        data_dir = tmp_path / "data"
        assert main(["gen-data", "--out", str(data_dir), "--seed", "1",
                     "--config", self._write(tmp_path, "n_samples = 16\nimage_size = 16\n")]) == 0
        cfg = self._write(tmp_path, CLI_CFG + f"train_dir = {data_dir}\nval_dir = {data_dir}\n")
        return tmp_path, data_dir, cfg

    @staticmethod
    def _write(tmp_path, text):
        n = len(list(tmp_path.glob("*.cfg")))
        path = tmp_path / f"cfg{n}.cfg"
        path.write_text(text)
        return str(path)

    def test_end_to_end(self, workspace, capsys):
        tmp_path, data_dir, cfg = workspace
        run_dir = tmp_path / "run"
        assert main(["pretrain", "--config", cfg, "--out", str(run_dir)]) == 0
        ckpt = run_dir / "checkpoint.dmim"
        assert ckpt.exists()
        assert (run_dir / "train_log.csv").exists()
        assert (run_dir / "val_loss.png").exists()

        # probe and finetune against the checkpoint
        probe_cfg = self._write(
            tmp_path, f"checkpoint = {ckpt}\ndata_dir = {data_dir}\n"
                      "epochs = 2\nbatch_size = 8\nbase_lr = 0.01\n")
        probe_dir = tmp_path / "probe"
        assert main(["probe", "--config", probe_cfg, "--out", str(probe_dir)]) == 0
        with open(probe_dir / "probe_result.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["tap_index", "seed", "accuracy"]
        assert 0.0 <= float(rows[1][2]) <= 1.0

        ft_dir = tmp_path / "ft"
        assert main(["finetune", "--config", probe_cfg, "--out", str(ft_dir),
                     "--freeze-first-k", "1"]) == 0
        assert (ft_dir / "finetune_result.csv").exists()

        # analysis produces CSV tables and rendered figures side by side
        an_cfg = self._write(tmp_path, f"checkpoint = {ckpt}\ndata_dir = {data_dir}\n")
        an_dir = tmp_path / "analysis"
        assert main(["analyze", "--config", an_cfg, "--out", str(an_dir)]) == 0
        for name in ("cka_profile.csv", "head_sim.csv", "val_loss.csv",
                     "cka_profile.png", "head_sim.png"):
            assert (an_dir / name).exists(), name

        # reconstructions keep visible pixels bitwise (modulo byte grid)
        rec_dir = tmp_path / "recon"
        assert main(["reconstruct", "--config", an_cfg, "--out", str(rec_dir),
                     "--seed", "3"]) == 0
        recons = sorted(rec_dir.glob("recon_*.ppm"))
        assert len(recons) == 16
        first = read_ppm(str(recons[0]))
        assert first.shape == (3, 16, 16)

    def test_resume_matches_full_run(self, workspace):
        tmp_path, data_dir, cfg = workspace
        full_dir = tmp_path / "full"
        assert main(["pretrain", "--config", cfg, "--out", str(full_dir)]) == 0

        # interrupt the same schedule after 2 of its 4 steps, then resume
        from mimdeep.config import parse_config as _pc
        from mimdeep.training import pretrain as _pt
        raw = _pc(cfg)
        mc = build_model_config(raw)
        tc = build_train_config(raw)
        specs = build_target_specs(raw, mc)
        ds = load_dataset(str(data_dir))
        part = _pt(mc, tc, specs, ds.images, val_images=ds.images,
                   stop_after_steps=2)
        ckpt_path = tmp_path / "partial.dmim"
        save_checkpoint(str(ckpt_path), mc, part.params, part.opt_state,
                        seed=tc.seed, step=2)
        res_dir = tmp_path / "resumed"
        assert main(["pretrain", "--config", cfg, "--out", str(res_dir),
                     "--resume", str(ckpt_path)]) == 0

        a = load_checkpoint(str(full_dir / "checkpoint.dmim"))
        b = load_checkpoint(str(res_dir / "checkpoint.dmim"))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_error_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("unknown_key = 1\n")
        assert main(["pretrain", "--config", str(cfg)]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_checkpoint(self, tmp_path, capsys):
        cfg = tmp_path / "p.cfg"
        cfg.write_text(f"checkpoint = {tmp_path}/nope.dmim\ndata_dir = {tmp_path}\n")
        assert main(["probe", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "error:" in capsys.readouterr().err
