import csv
import struct

import numpy as np
import pytest

from dpsnet import checkpoint as C
from dpsnet import cli
from dpsnet import gradcheck
from dpsnet import train as TR
from dpsnet.synth import synthetic_dataset, write_dataset

TINY = dict(input_size=(64, 64), channels=8, patches=2, ref_points=2, heads=2,
            stage_channels=(4, 8, 8, 8), batch_size=2, synthetic_count=4, epochs=1)


def tiny(**kw):
    return TR.TrainConfig(**{**TINY, **kw})


class TestTrainConfig:
    def test_defaults(self):
        cfg = TR.TrainConfig()
        assert (cfg.lr_start, cfg.lr_end, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (1e-4, 1e-5, 0.9, 0.999, 1e-8)
        assert cfg.input_size == (96, 96) and cfg.channels == 32
        assert (cfg.patches, cfg.ref_points, cfg.batch_size) == (3, 3, 4)

    def test_text_round_trip(self):
        cfg = tiny(lr_start=3e-4, bfm=False, offset_scale=0.5)
        assert TR.TrainConfig.from_text(cfg.to_text()) == cfg

    def test_comments_and_blank_lines(self):
        cfg = TR.TrainConfig.from_text("# desk run\n\nepochs = 3   # short\ninput_size = 64x64\npatches = 2\n")
        assert cfg.epochs == 3 and cfg.input_size == (64, 64)

    @pytest.mark.parametrize(
        "text,match",
        [
            ("bogus = 1\n", "unknown key"),
            ("epochs 3\n", "key = value"),
            ("epochs = many\n", "bad value"),
            ("dps = maybe\n", "bad value"),
            ("lr_start = 1e-5\nlr_end = 1e-4\n", "lr_end"),
            ("batch_size = 0\n", "batch_size"),
            ("patches = 5\n", "patches"),
        ],
    )
    def test_malformed(self, text, match):
        with pytest.raises(TR.ConfigError, match=match):
            TR.TrainConfig.from_text(text)


class TestSchedule:
    def test_endpoints(self):
        assert TR.cosine_lr(0, 100, 1e-4, 1e-5) == 1e-4
        assert TR.cosine_lr(100, 100, 1e-4, 1e-5) == 1e-5

    def test_midpoint(self):
        assert TR.cosine_lr(50, 100, 1e-4, 1e-5) == pytest.approx(5.5e-5, rel=1e-12)

    def test_clamps_past_end(self):
        assert TR.cosine_lr(250, 100, 1e-4, 1e-5) == 1e-5

    def test_monotone(self):
        lrs = [TR.cosine_lr(s, 40, 1e-4, 1e-5) for s in range(41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdam:
    def test_zero_gradient(self):
        p, m, v = np.ones(3), np.full(3, 0.5), np.full(3, 0.25)
        p2, m2, v2 = TR.adam_step(p, np.zeros(3), m, v, 5, 1e-3)
        # bias-corrected update of a decaying moment is not zero, so compare moments only
        np.testing.assert_allclose(m2, 0.45)
        np.testing.assert_allclose(v2, 0.25 * 0.999)
        p3, _, _ = TR.adam_step(p, np.zeros(3), np.zeros(3), np.zeros(3), 1, 1e-3)
        np.testing.assert_array_equal(p3, p)

    def test_hand_trace(self):
        # scalar, g = 0.3 then -0.1; written out from the update equations
        p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p, m, v = TR.adam_step(p, np.array([0.3]), m, v, 1, lr)
        p1 = 1.0 - lr * 0.3 / (0.3 + eps)
        assert p[0] == pytest.approx(p1, rel=1e-15)
        p, m, v = TR.adam_step(p, np.array([-0.1]), m, v, 2, lr)
        m_ref = b1 * 0.03 - 0.01
        v_ref = b2 * 0.001 * 0.09 + 0.001 * 0.01
        step = lr * (m_ref / (1 - b1**2)) / (np.sqrt(v_ref / (1 - b2**2)) + eps)
        assert m[0] == pytest.approx(m_ref, rel=1e-14) and v[0] == pytest.approx(v_ref, rel=1e-14)
        assert p[0] == pytest.approx(p1 - step, rel=1e-14)

    def test_first_step_is_sign_like(self, rng):
        g = rng.standard_normal(10)
        p, _, _ = TR.adam_step(np.zeros(10), g, np.zeros(10), np.zeros(10), 1, 1e-3)
        np.testing.assert_allclose(p, -1e-3 * np.sign(g), rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            TR.adam_step(np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(3), 1, 1e-3)

    def test_determinism_10_steps(self):
        from dpsnet.tensor import Tensor

        def run():
            p = Tensor(np.linspace(-1, 1, 6), requires_grad=True)
            opt = TR.Adam({"p": p})
            for _ in range(10):
                p.grad = None
                ((p * p * p).sum()).backward()
                opt.step(1e-2)
            return p.data.tobytes()

        assert run() == run()


class TestCheckpoint:
    def test_layout_and_round_trip(self):
        ck = C.Checkpoint("a = 1\n", 7, {"w": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)})
        raw = C.to_bytes(ck)
        assert raw[:8] == b"DPSNETCK" and struct.unpack("<I", raw[8:12])[0] == C.VERSION
        back = C.from_bytes(raw)
        assert back.config_text == "a = 1\n" and back.step == 7
        np.testing.assert_array_equal(back.tensors["w"], ck.tensors["w"])
        assert back.tensors["s"].shape == ()
        assert C.to_bytes(back) == raw

    def test_version_mismatch(self):
        raw = bytearray(C.to_bytes(C.Checkpoint("", 0, {})))
        raw[8:12] = struct.pack("<I", 99)
        with pytest.raises(C.CheckpointError, match="version 99"):
            C.from_bytes(bytes(raw))

    def test_bad_magic_and_truncation(self):
        raw = C.to_bytes(C.Checkpoint("x", 1, {"w": np.ones(4)}))
        with pytest.raises(C.CheckpointError, match="magic"):
            C.from_bytes(b"NOTACKPT" + raw[8:])
        with pytest.raises(C.CheckpointError, match="truncated"):
            C.from_bytes(raw[:-3])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny(epochs=2)
    samples = TR.training_samples(cfg)
    res = TR.train(cfg, samples, out)
    return cfg, samples, res, out


class TestTraining:
    def test_zero_epochs(self, tmp_path):
        cfg = tiny(epochs=0)
        TR.train(cfg, TR.training_samples(cfg), tmp_path)
        assert (tmp_path / TR.LOG_NAME).read_text() == TR.LOG_HEADER + "\n"
        ck = C.load(tmp_path / TR.CHECKPOINT_NAME)
        assert ck.step == 0
        _, model, _ = TR.restore(ck)
        fresh = TR.build_model(cfg)
        for (_, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_log_and_checkpoint(self, trained):
        cfg, samples, res, out = trained
        lines = (out / TR.LOG_NAME).read_text().splitlines()
        assert lines[0] == "epoch,step,lr,wbce,wiou,bbce,total"
        assert len(lines) == 1 + 4
        rows = [dict(zip(lines[0].split(","), l.split(","))) for l in lines[1:]]
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
        assert float(rows[0]["lr"]) == cfg.lr_start
        ck = C.load(out / TR.CHECKPOINT_NAME)
        assert ck.step == 4
        names = list(ck.tensors)
        n = len(list(res.model.named_parameters()))
        assert all(k.startswith("param/") for k in names[:n])
        assert all(k.startswith("adam_m/") for k in names[n : 2 * n])
        assert all(k.startswith("adam_v/") for k in names[2 * n :])

    def test_restore_then_save_identical(self, trained):
        _, _, _, out = trained
        raw = (out / TR.CHECKPOINT_NAME).read_bytes()
        cfg, model, opt = TR.restore(C.from_bytes(raw))
        assert C.to_bytes(TR.make_checkpoint(cfg, model, opt)) == raw

    def test_evaluate_csv(self, trained, tmp_path):
        _, samples, res, _ = trained
        rows = TR.evaluate(res.model, ["a", "b", "c", "d"], samples, tmp_path / "m.csv")
        with open(tmp_path / "m.csv") as fh:
            table = list(csv.reader(fh))
        assert table[0] == ["name", "mae", "s_measure", "e_measure", "weighted_f"]
        assert [r[0] for r in table[1:]] == ["a", "b", "c", "d", "mean"]
        assert float(table[-1][1]) == pytest.approx(np.mean([r["mae"] for r in rows[:-1]]), rel=1e-9)

    def test_size_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="input_size"):
            TR.train(tiny(), synthetic_dataset(0, 2, (96, 96)), tmp_path)

    @pytest.mark.parametrize("flags", [dict(dps=False), dict(bfm=False), dict(boundary_decoder=False, bfm=False),
                                       dict(mffm=False, dps=False, boundary_decoder=False, bfm=False)])
    def test_ablation_configs_train(self, tmp_path, flags):
        cfg = tiny(**flags)
        res = TR.train(cfg, TR.training_samples(cfg), tmp_path, max_steps=1)
        assert np.isfinite(res.log[0]["total"])
        if not cfg.boundary_decoder:
            assert res.log[0]["bbce"] == 0.0


class TestCLI:
    def write_config(self, tmp_path, **kw):
        path = tmp_path / "run.cfg"
        path.write_text(tiny(**kw).to_text())
        return path

    def test_synth_train_evaluate(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert cli.main(["synth", "--seed", "3", "--count", "2", "--size", "64x64", "--out", str(data)]) == 0
        assert (data / "masks" / "0001.pgm").exists() and (data / "boundaries" / "0000.pgm").exists()
        cfg = self.write_config(tmp_path, epochs=1)
        out = tmp_path / "out"
        assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--quiet"]) == 0
        assert cli.main(["evaluate", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(data),
                         "--csv", str(tmp_path / "eval.csv")]) == 0
        assert (tmp_path / "eval.csv").read_text().splitlines()[-1].startswith("mean,")

    def test_train_synthetic(self, tmp_path):
        cfg = self.write_config(tmp_path, epochs=0)
        assert cli.main(["train", "--config", str(cfg), "--synthetic", "2", "--out", str(tmp_path / "o")]) == 0

    def test_config_error_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs = 1\nwhat = 2\n")
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_missing_config_exit_3(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 3
        assert "none.cfg" in capsys.readouterr().err

    def test_missing_data_exit_3(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / "nodata"), "--out", str(tmp_path)]) == 3
        assert "nodata" in capsys.readouterr().err

    def test_checkpoint_version_exit_3(self, tmp_path, capsys):
        path = tmp_path / "old.bin"
        raw = bytearray(C.to_bytes(C.Checkpoint(tiny().to_text(), 0, {})))
        raw[8:12] = struct.pack("<I", 0)
        path.write_bytes(bytes(raw))
        assert cli.main(["evaluate", "--checkpoint", str(path), "--data", str(tmp_path), "--csv", "x.csv"]) == 3
        assert "version 0" in capsys.readouterr().err

    def test_gradcheck_pass_and_fail(self, monkeypatch, capsys):
        assert cli.main(["gradcheck", "--suite", "conv2d", "--suite", "bfm"]) == 0
        assert "2/2 suites passed" in capsys.readouterr().out
        monkeypatch.setattr(gradcheck, "TOLERANCE", 0.0)
        assert cli.main(["gradcheck", "--suite", "conv2d"]) == 4

    def test_unknown_suite_exit_2(self):
        assert cli.main(["gradcheck", "--suite", "nope"]) == 2

    def test_bad_synth_size_exit_2(self, tmp_path):
        assert cli.main(["synth", "--size", "50x64", "--out", str(tmp_path)]) == 2
