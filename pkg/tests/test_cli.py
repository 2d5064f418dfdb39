import numpy as np
import pytest

from densityflow.cli import main
from densityflow.config import RunConfig, format_config
from densityflow.formats import read_dmap, read_ppm
from densityflow.metrics import EvalRecord, mae
from densityflow.model import CountingNet, load_checkpoint, params_from_entries, save_checkpoint
from densityflow.synth import SceneSpec, Tracks, generate, read_scene, render_frame, write_scene
from densityflow.train import pair_samples

TINY = dict(
    n_scenes=3, n_folds=1, n_test=1, H=32, W=32, n_frames=4, objects=(3, 10),
    base_channels=4, fused_channels=4, stream_channels=4, motion_channels=2,
    epochs=1, lr=1e-3,
)


def write_config(path, **kw):
    path.write_text(format_config(RunConfig(**{**TINY, **kw})))
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def data(tmp_path, capsys):
    cfg = write_config(tmp_path / "tiny.cfg")
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path / "data")[0] == 0
    return tmp_path / "data", cfg


def read_log(path):
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "step\tl_flow\tl_cycle\tl_depth\ttotal"
    return [[float(v) for v in line.split("\t")] for line in lines[1:]]


class TestSynth:
    def test_default_config_splits(self, tmp_path, capsys):
        # default dataset written without the per-scene files: splits are cheap to check
        code, out, _ = run(capsys, "synth", "--out", tmp_path)
        assert code == 0
        assert len(list((tmp_path / "scenes").iterdir())) == 29
        fold0 = [l.split("\t") for l in (tmp_path / "splits.txt").read_text().split("\n") if l.startswith("fold\t0")]
        assert [(f[2], len(f) - 3) for f in fold0] == [("train", 20), ("test", 9)]
        assert "fold 0: 20 train / 9 test" in out

    def test_empty(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--config", write_config(tmp_path / "c", n_scenes=0, n_test=-1), "--out", tmp_path / "o")
        assert code == 0 and out.startswith("0 scenes")
        assert (tmp_path / "o" / "splits.txt").exists()

    def test_byte_identical(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c")
        run(capsys, "synth", "--config", cfg, "--seed", 5, "--out", tmp_path / "a")
        run(capsys, "synth", "--config", cfg, "--seed", 5, "--out", tmp_path / "b")
        run(capsys, "synth", "--config", cfg, "--seed", 6, "--out", tmp_path / "c6")
        a, b, c = tree(tmp_path / "a"), tree(tmp_path / "b"), tree(tmp_path / "c6")
        assert a == b
        assert a != c


class TestTrain:
    def test_one_epoch_lowers_loss(self, data, tmp_path, capsys):
        d, cfg = data
        code, out, _ = run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / "run")
        assert code == 0 and "epoch 0" in out
        rows = read_log(tmp_path / "run" / "log.tsv")
        assert len(rows) == 2 * 3
        assert rows[-1][4] < rows[0][4]
        assert (tmp_path / "run" / "epoch_000.ckpt.manifest").exists()

    def test_zero_lr_keeps_parameters(self, data, tmp_path, capsys):
        d, _ = data
        cfg = write_config(tmp_path / "z.cfg", lr=0.0, weight_decay=0.0)
        assert run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / "run")[0] == 0
        entries = load_checkpoint(tmp_path / "run" / "epoch_000.ckpt")
        initial = CountingNet(RunConfig(**TINY).net_config()).params
        for name, t in initial.items():
            assert entries[name].tobytes() == t.data.tobytes()

    def test_resume_bit_exact(self, data, tmp_path, capsys):
        d, _ = data
        cfg2 = write_config(tmp_path / "two.cfg", epochs=2)
        cfg1 = write_config(tmp_path / "one.cfg", epochs=1)
        run(capsys, "train", "--config", cfg2, "--data", d, "--out", tmp_path / "full")
        run(capsys, "train", "--config", cfg1, "--data", d, "--out", tmp_path / "part")
        code, _, _ = run(capsys, "train", "--config", cfg2, "--data", d, "--out", tmp_path / "part",
                         "--checkpoint", tmp_path / "part" / "epoch_000.ckpt")
        assert code == 0
        for suffix in ("", ".manifest"):
            name = "epoch_001.ckpt" + suffix
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()
        assert (tmp_path / "full" / "log.tsv").read_bytes() == (tmp_path / "part" / "log.tsv").read_bytes()

    def test_divergence_reports_nonfinite(self, data, tmp_path, capsys):
        d, _ = data
        cfg = write_config(tmp_path / "big.cfg", lr=1e300)
        code, _, err = run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / "run")
        assert code != 0
        assert err.startswith("ERROR:nonfinite_loss:") and err.count("\n") == 1

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--out", tmp_path / "nothing")
        assert code != 0 and err.startswith("ERROR:data:")


def zero_checkpoint(tmp_path, capsys, d):
    run(capsys, "train", "--config", write_config(tmp_path / "z.cfg", lr=0.0), "--data", d, "--out", tmp_path / "zero")
    path = tmp_path / "zero" / "epoch_000.ckpt"
    entries = load_checkpoint(path)
    for k in entries:
        if not k.startswith("train."):
            entries[k] = np.zeros_like(entries[k])
    save_checkpoint(path, entries, "float64")
    return path


class TestEval:
    def test_zero_checkpoint_gives_mean_count(self, data, tmp_path, capsys):
        d, cfg = data
        ckpt = zero_checkpoint(tmp_path, capsys, d)
        code, out, _ = run(capsys, "eval", "--config", cfg, "--data", d, "--out", tmp_path / "ev", "--checkpoint", ckpt)
        assert code == 0
        rows = [l.split("\t") for l in (tmp_path / "ev" / "results_fold0.tsv").read_text().strip().split("\n")]
        truth = np.array([float(r[2]) for r in rows])
        assert all(float(r[3]) == 0.0 for r in rows)
        assert float(out.split("\n")[2].split()[1]) == pytest.approx(truth.mean(), abs=5e-3)
        records = [EvalRecord(r[0], int(r[1]), float(r[2]), float(r[3])) for r in rows]
        assert mae(records) == pytest.approx(truth.mean(), rel=1e-9)

    def test_deterministic_and_rmse_at_least_mae(self, data, tmp_path, capsys):
        d, cfg = data
        run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / "run")
        ckpt = tmp_path / "run" / "epoch_000.ckpt"
        outs = []
        for name in ("e1", "e2"):
            code, out, _ = run(capsys, "eval", "--config", cfg, "--data", d, "--out", tmp_path / name, "--checkpoint", ckpt)
            assert code == 0
            outs.append(tree(tmp_path / name))
        assert outs[0] == outs[1]
        row = outs[0]["summary.txt"].decode().split("\n")[1].split()
        assert float(row[2]) >= float(row[1])

    def test_needs_checkpoint(self, data, capsys):
        d, cfg = data
        code, _, err = run(capsys, "eval", "--config", cfg, "--data", d, "--out", d / "ev")
        assert code != 0 and err.startswith("ERROR:usage:")

    def test_bad_checkpoint(self, data, tmp_path, capsys):
        d, cfg = data
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        (tmp_path / "bad.ckpt.manifest").write_text("x 1\n")
        code, _, err = run(capsys, "eval", "--config", cfg, "--data", d, "--checkpoint", tmp_path / "bad.ckpt",
                             "--out", tmp_path / "ev")
        assert code != 0 and err.startswith("ERROR:checkpoint:")


def three_cluster_scene(directory):
    spec = SceneSpec(seed=0, H=64, W=64, n_frames=2, n_objects=9, blob_radius=(2.0, 2.0))
    centres = [(44, 44)] * 6 + [(12, 12)] * 2 + [(52, 12)]
    jitter = np.random.default_rng(0).uniform(-2, 2, size=(9, 2))
    start = np.array(centres, dtype=float) + jitter
    positions = np.stack([start, start, start])
    tracks = Tracks(positions, np.full(9, 2.0), np.linspace(0.2, 0.9, 9))
    lattice = np.random.default_rng([0, 2]).uniform(size=(16, 16))
    bundles = [render_frame(spec, tracks, t, lattice) for t in range(2)]
    return write_scene(directory, spec, bundles)


class TestRender:
    def test_empty_frame_is_black(self, tmp_path, capsys):
        spec = SceneSpec(seed=1, H=32, W=32, n_frames=2, n_objects=0)
        write_scene(tmp_path / "empty", spec, generate(spec))
        code, _, _ = run(capsys, "render", "--scene", tmp_path / "empty", "--frame", 1, "--out", tmp_path / "r")
        assert code == 0
        assert not read_ppm(tmp_path / "r" / "gt.ppm").any()
        assert not read_dmap(tmp_path / "r" / "gt.dmap").any()

    def test_prediction_round_trip(self, data, tmp_path, capsys):
        d, cfg = data
        run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / "run")
        ckpt = tmp_path / "run" / "epoch_000.ckpt"
        scene = sorted((d / "scenes").iterdir())[0]
        code, _, _ = run(capsys, "render", "--config", cfg, "--scene", scene, "--frame", 2,
                         "--out", tmp_path / "r", "--checkpoint", ckpt)
        assert code == 0
        net_cfg = RunConfig(**TINY).net_config()
        net = CountingNet(net_cfg, params_from_entries(net_cfg, load_checkpoint(ckpt)))
        sample = pair_samples(scene.name, read_scene(scene)[1])[1]
        pred = net.forward_pair(sample.prev, sample.cur, sample.flow_fwd).density.numpy()
        assert read_dmap(tmp_path / "r" / "pred.dmap").tobytes() == pred.astype(np.float32).tobytes()
        assert read_dmap(tmp_path / "r" / "depth.dmap").shape == (4, 4)

    def test_gt_argmax_on_dominant_cluster(self, tmp_path, capsys):
        scene = three_cluster_scene(tmp_path / "clusters")
        code, out, _ = run(capsys, "render", "--scene", scene, "--frame", 1, "--out", tmp_path / "r")
        assert code == 0 and "true 9" in out
        gt = read_dmap(tmp_path / "r" / "gt.dmap")
        assert np.unravel_index(np.argmax(gt), gt.shape) == (44 // 8, 44 // 8)
        img = read_ppm(tmp_path / "r" / "gt.ppm")
        assert img[0].max() == 1.0 and img[0][5, 5] == 1.0

    def test_frame_out_of_range(self, tmp_path, capsys):
        scene = three_cluster_scene(tmp_path / "clusters")
        code, _, err = run(capsys, "render", "--scene", scene, "--frame", 0, "--out", tmp_path / "r")
        assert code == 2 and err.startswith("ERROR:usage:")


class TestMotionProfile:
    def test_constant_drift(self, tmp_path, capsys):
        spec = SceneSpec(seed=2, H=32, W=32, n_frames=3, n_objects=0, camera_drift=(3.0, 4.0))
        write_scene(tmp_path / "s", spec, generate(spec))
        code, out, _ = run(capsys, "motion-profile", "--scene", tmp_path / "s")
        assert code == 0
        lines = out.strip().split("\n")
        assert lines[1:4] == ["0\t5.0000\tslow", "1\t5.0000\tslow", "2\t5.0000\tslow"]
        assert lines[-1] == "scene\t5.0000\tslow"

    def test_missing_scene(self, tmp_path, capsys):
        code, _, err = run(capsys, "motion-profile", "--scene", "nope", "--out", tmp_path)
        assert code == 1 and err.startswith("ERROR:data:")


class TestErrors:
    def test_unknown_command(self, capsys):
        code, _, err = run(capsys, "fly")
        assert code == 2 and err.startswith("ERROR:usage:")

    def test_bad_seed(self, capsys):
        code, _, err = run(capsys, "synth", "--seed", -3)
        assert code == 2 and err.startswith("ERROR:usage:")

    def test_bad_config(self, tmp_path, capsys):
        (tmp_path / "c").write_text("wings=2\n")
        code, _, err = run(capsys, "synth", "--config", tmp_path / "c")
        assert code == 1 and err.startswith("ERROR:config:") and "unknown config key" in err
