import json
import math

import numpy as np
import pytest

from splatgcn import cli, network, synth
from splatgcn.cli import main
from splatgcn.skeleton import SkeletonSequence, save_sequence


@pytest.fixture(scope="module")
def seq_file(tmp_path_factory):
    rng = np.random.default_rng(0)
    path = tmp_path_factory.mktemp("seq") / "seq.json"
    save_sequence(SkeletonSequence(rng.uniform(-0.8, 0.8, (4, 3, 3))), path)
    return path


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps({
        "num_joints": 5, "num_frames": 8, "samples_per_class": 6,
        "noise_std": 0.0, "seed": 2,
    }))
    rc = main(["synth", "--task", "speed_discrimination",
               "--out", str(out / "ds"), "--spec", str(spec_path)])
    assert rc == 0
    return out / "ds"


def small_train_config(tmp_path, epochs=2, **train_extra):
    cfg = {
        "model": {"num_blocks": 4, "channels_per_stage": [8, 16, 32],
                  "temporal_strides": [1, 1, 2, 1], "num_classes": 2,
                  "visual_dim": 16},
        "loss": {"warmup_epochs": 2, "lr_base": 0.02},
        "train": {"epochs": epochs, "batch_size": 4, "seed": 0, **train_extra},
        "render": {"height": 16, "width": 16},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestRenderCommand:
    def test_file_count_and_manifest(self, seq_file, tmp_path):
        out = tmp_path / "render"
        assert main(["render", "--input", str(seq_file), "--out", str(out)]) == 0
        pgms = list(out.glob("*.pgm"))
        assert len(pgms) == 3 * 4  # three views, four frames
        assert len(list(out.glob("*.csv"))) == 3 * 4
        assert (out / "run_manifest.json").exists()
        assert (out / "heatmaps.json").exists()

    def test_size_flag_controls_resolution(self, seq_file, tmp_path):
        out = tmp_path / "render32"
        assert main(["render", "--input", str(seq_file), "--out", str(out),
                     "--size", "32"]) == 0
        frame = np.loadtxt(next(iter(sorted(out.glob("*.csv")))), delimiter=",")
        assert frame.shape == (32, 32)

    def test_isotropic_flag_gives_unit_aspect(self, tmp_path):
        # one fast joint moving along x near one corner, a far-away anchor in
        # the other; the mover's quadrant isolates its second-moment ellipse
        t = np.arange(6)
        pos = np.zeros((6, 2, 3))
        pos[:, 0, 0] = -0.9 + 0.2 * t
        pos[:, 0, 1] = -0.6
        pos[:, 1] = (0.9, 0.9, 0.9)
        path = tmp_path / "fast.json"
        save_sequence(SkeletonSequence(pos), path)

        def aspect(out_dir, flags):
            assert main(["render", "--input", str(path), "--out", str(out_dir),
                         *flags]) == 0
            frame = np.loadtxt(out_dir / "view0_frame0002.csv", delimiter=",")
            frame = frame[:16, :]  # mover's half-plane (low y rows)
            ys, xs = np.mgrid[0:16, 0:32]
            w = frame / frame.sum()
            mx, my = (w * xs).sum(), (w * ys).sum()
            cxx = (w * (xs - mx) ** 2).sum()
            cyy = (w * (ys - my) ** 2).sum()
            cxy = (w * (xs - mx) * (ys - my)).sum()
            eigs = np.linalg.eigvalsh([[cxx, cxy], [cxy, cyy]])
            return eigs[1] / eigs[0]

        aniso = aspect(tmp_path / "a", [])
        iso = aspect(tmp_path / "i", ["--isotropic"])
        assert aniso > 1.5
        assert iso == pytest.approx(1.0, abs=0.15)

    def test_error_exit_code(self, tmp_path, capsys):
        rc = main(["render", "--input", str(tmp_path / "missing.json"),
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestTopologyCommand:
    def test_csv_diagonal_and_symmetry(self, seq_file, tmp_path):
        out = tmp_path / "prior.csv"
        assert main(["topology", "--input", str(seq_file), "--out", str(out)]) == 0
        prior = np.loadtxt(out, delimiter=",")
        np.testing.assert_array_equal(np.diag(prior), np.ones(3))
        np.testing.assert_allclose(prior, prior.T, atol=1e-15)
        assert (tmp_path / "prior.csv.meta.json").exists()

    def test_rigid_pair_ordering(self, tmp_path):
        spec = synth.SyntheticTaskSpec(task="correlation_topology", num_joints=5,
                                       num_frames=8, samples_per_class=1, seed=0)
        seq = synth.generate_correlation_task(spec)[0]  # label 0: pair (1, 2)
        path = tmp_path / "corr.json"
        save_sequence(seq, path)
        out = tmp_path / "prior.csv"
        assert main(["topology", "--input", str(path), "--out", str(out)]) == 0
        prior = np.loadtxt(out, delimiter=",")
        assert prior[1, 2] > prior[1, 3]


class TestGradcheckCommand:
    def test_passes_and_lists_log_scale(self, tmp_path, capsys):
        rc = main(["gradcheck", "--seed", "0"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "log_scale" in out
        assert "max_relative_error" in out

    def test_corrupted_gradient_fails(self, tmp_path, capsys):
        cfg = small_train_config(tmp_path)
        network.GRADIENT_TAMPER["head.w"] = 1.0
        try:
            rc = main(["gradcheck", "--config", str(cfg), "--seed", "0"])
        finally:
            network.GRADIENT_TAMPER.clear()
        assert rc == 1


class TestTrainEvalCommands:
    def test_train_writes_metrics_and_checkpoint(self, dataset_dir, tmp_path):
        cfg = small_train_config(tmp_path, epochs=2)
        out = tmp_path / "run"
        rc = main(["train", "--config", str(cfg),
                   "--data", str(dataset_dir / "manifest.json"), "--out", str(out)])
        assert rc == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,lambda,loss_ce,loss_topo,accuracy"
        assert len(lines) == 1 + 2  # header + one row per epoch
        assert (out / "checkpoint.npz").exists()
        assert (out / "run_manifest.json").exists()

    def test_resume_continues_epoch_counter(self, dataset_dir, tmp_path):
        out = tmp_path / "resume"
        cfg2 = small_train_config(tmp_path, epochs=2)
        assert main(["train", "--config", str(cfg2),
                     "--data", str(dataset_dir / "manifest.json"),
                     "--out", str(out)]) == 0
        cfg4 = small_train_config(tmp_path, epochs=4)
        assert main(["train", "--config", str(cfg4),
                     "--data", str(dataset_dir / "manifest.json"),
                     "--out", str(out)]) == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        epochs = [int(row.split(",")[0]) for row in lines[1:]]
        assert epochs == [0, 1, 2, 3]

    def test_ablate_pt_freezes_beta_and_topo_loss(self, dataset_dir, tmp_path):
        import splatgcn.autodiff as ad

        cfg = small_train_config(tmp_path, epochs=2)
        out = tmp_path / "ablate"
        rc = main(["train", "--config", str(cfg),
                   "--data", str(dataset_dir / "manifest.json"),
                   "--out", str(out), "--ablate", "pt"])
        assert rc == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        topo_values = {float(row.split(",")[4]) for row in lines[1:]}
        assert topo_values == {0.0}
        params, _, _, _, cfg_json = ad.load_checkpoint(out / "checkpoint.npz")
        assert float(params["block0.beta"]) == 0.0
        assert json.loads(cfg_json)["model"]["prior_enabled"] is False

    def test_eval_reproducible_and_in_range(self, dataset_dir, tmp_path, capsys):
        cfg = small_train_config(tmp_path, epochs=2)
        out = tmp_path / "eval_run"
        assert main(["train", "--config", str(cfg),
                     "--data", str(dataset_dir / "manifest.json"),
                     "--out", str(out)]) == 0
        accs = []
        for _ in range(2):
            rc = main(["eval", "--checkpoint", str(out / "checkpoint.npz"),
                       "--data", str(dataset_dir / "manifest.json")])
            assert rc == 0
            accs.append(capsys.readouterr().out.strip())
        assert accs[0] == accs[1]
        assert 0.0 <= float(accs[0]) <= 1.0


class TestSynthCommand:
    def test_manifest_entry_count(self, dataset_dir):
        with open(dataset_dir / "manifest.json") as fh:
            manifest = json.load(fh)
        assert len(manifest["items"]) == 2 * 6

    def test_same_seed_byte_identical(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"num_joints": 4, "num_frames": 6,
                                         "samples_per_class": 2, "seed": 9}))
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["synth", "--task", "correlation_topology",
                         "--out", str(out), "--spec", str(spec_path)]) == 0
            outs.append(out)
        for f in sorted(outs[0].glob("class*.json")):
            assert f.read_bytes() == (outs[1] / f.name).read_bytes()

    def test_reseeded_run_differs(self, tmp_path):
        files = []
        for seed in (1, 2):
            spec_path = tmp_path / f"spec{seed}.json"
            spec_path.write_text(json.dumps({"num_joints": 4, "num_frames": 6,
                                             "samples_per_class": 2, "seed": seed}))
            out = tmp_path / f"out{seed}"
            assert main(["synth", "--task", "speed_discrimination",
                         "--out", str(out), "--spec", str(spec_path)]) == 0
            files.append(sorted(out.glob("class*.json"))[0].read_bytes())
        assert files[0] != files[1]
