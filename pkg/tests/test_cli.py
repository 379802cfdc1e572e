import json

import numpy as np
import pytest

from vesselkit import network as net
from vesselkit.cli import main
from vesselkit.metrics import bifurcation_hit_or_miss, confusion, precision_recall_dice
from vesselkit.vasculature import load_tree
from vesselkit.volume import LabelVolume, Volume3D, read_volume, write_volume


def files_of(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "config.json"}


def rerun_from_config(src, dst):
    cfg = json.loads((src / "config.json").read_text())
    return main([cfg["command"], "--config", str(src / "config.json"), "--out", str(dst)])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["generate", "--n", "2", "--shape", "20", "--seed", "7", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    argv = ["train", "--data", str(dataset), "--arch", "compact", "--patch", "20", "--iters", "10",
            "--log-every", "5", "--out", str(d)]
    assert main(argv) == 0
    return d


def test_generate_outputs(dataset):
    names = {p.name for p in dataset.iterdir()}
    assert {"manifest.json", "config.json", "vol_001_image.raw", "vol_001_tree.json"} <= names
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["n"] == 2 and len(manifest["volumes"]) == 2
    cfg = json.loads((dataset / "config.json").read_text())
    assert cfg["command"] == "generate" and cfg["shape"] == [20] and cfg["seed"] == 7


def test_generate_deterministic(dataset, tmp_path):
    assert rerun_from_config(dataset, tmp_path) == 0
    assert files_of(dataset) == files_of(tmp_path)


@pytest.mark.parametrize("argv", [
    ["generate", "--shape", "0"],
    ["generate", "--n", "0"],
    ["generate", "--shape", "4", "4"],
    ["generate", "--threads", "0"],
    ["bench", "--kernels", "4"],
    ["bench", "--repeats", "2"],
])
def test_invalid_flags_exit_1(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == 1


def test_missing_out_and_unknown_command():
    assert main(["generate"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"n": 1, "shape": [12], "seed": 3}))
    out = tmp_path / "o"
    assert main(["generate", "--config", str(conf), "--seed", "4", "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert (cfg["n"], cfg["shape"], cfg["seed"]) == (1, [12], 4)


def test_config_rejects_unknown_keys_and_wrong_command(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"bogus": 1}))
    assert main(["generate", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1
    conf.write_text(json.dumps({"command": "train"}))
    assert main(["generate", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1


def test_train_outputs_and_log_rows(trained):
    log = net.TrainLog.from_csv((trained / "train_log.csv").read_text())
    assert log.column("iteration") == [5, 10]
    spec, params, header = net.load_checkpoint(trained / "model")
    assert header["meta"] == {"task": "vessel", "loss": "l1l2"} and header["iteration"] == 10


def test_train_deterministic(trained, tmp_path):
    assert rerun_from_config(trained, tmp_path) == 0
    assert files_of(trained) == files_of(tmp_path)


def test_train_zero_iters_is_init(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--arch", "compact", "--patch", "20", "--iters", "0",
                 "--seed", "2", "--out", str(tmp_path)]) == 0
    spec, params, _ = net.load_checkpoint(tmp_path / "model")
    assert np.array_equal(params.to_vector(), net.init_parameters(spec, 2).to_vector())


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1


def test_train_channel_mismatch(dataset, trained, tmp_path):
    assert main(["train", "--data", str(dataset), "--task", "bifurcation", "--init", str(trained / "model"),
                 "--iters", "1", "--patch", "20", "--out", str(tmp_path)]) == 1


def test_predict_zero_checkpoint(dataset, tmp_path):
    spec = net.NetworkSpec.compact()
    net.save_checkpoint(tmp_path / "zero", spec, net.zero_parameters(spec), meta={"task": "vessel"})
    out = tmp_path / "p"
    assert main(["predict", "--checkpoint", str(tmp_path / "zero"), "--input",
                 str(dataset / "vol_000_image"), "--out", str(out)]) == 0
    assert np.all(read_volume(out / "prob").data == 0.5)
    assert read_volume(out / "mask", "vessel").data.all()
    out2 = tmp_path / "q"
    assert main(["predict", "--checkpoint", str(tmp_path / "zero"), "--input",
                 str(dataset / "vol_000_image"), "--threshold", "1.1", "--out", str(out2)]) == 0
    assert not read_volume(out2 / "mask", "vessel").data.any()


def test_predict_deterministic_and_matches_library(dataset, trained, tmp_path):
    out = tmp_path / "p"
    assert main(["predict", "--checkpoint", str(trained / "model"), "--input",
                 str(dataset / "vol_001_image"), "--out", str(out)]) == 0
    assert rerun_from_config(out, tmp_path / "p2") == 0
    assert files_of(out) == files_of(tmp_path / "p2")
    from vesselkit.tasks import task_inputs
    spec, params, _ = net.load_checkpoint(trained / "model")
    ref = net.forward(spec, params, task_inputs("vessel", image=read_volume(dataset / "vol_001_image")))
    assert np.array_equal(read_volume(out / "prob").data, ref.astype(np.float32))


def test_predict_channel_mismatch(dataset, trained, tmp_path):
    assert main(["predict", "--checkpoint", str(trained / "model"), "--input", str(dataset / "vol_000_image"),
                 "--extra", str(dataset / "vol_000_vessel"), "--out", str(tmp_path)]) == 1


def test_eval_perfect_and_empty(dataset, tmp_path):
    gt = dataset / "vol_000_vessel"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["volumes"][0]["dice"] == 1.0 and rep["aggregate"]["dice"]["mean"] == 1.0
    empty = tmp_path / "empty"
    write_volume(Volume3D.zeros(read_volume(gt).shape), empty)
    assert main(["eval", "--pred", str(empty), "--gt", str(gt), "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b" / "report.json").read_text())
    assert rep["volumes"][0]["recall"] == 0.0


def test_eval_matches_library(dataset, tmp_path):
    rng = np.random.default_rng(0)
    preds, gts = [], []
    for i in range(2):
        p = tmp_path / f"prob{i}"
        write_volume(Volume3D(rng.uniform(size=(20, 20, 20))), p)
        preds.append(str(p))
        gts.append(str(dataset / f"vol_{i:03d}_vessel"))
    assert main(["eval", "--pred", *preds, "--gt", *gts, "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    dices = []
    for row, p, g in zip(rep["volumes"], preds, gts):
        c = confusion(read_volume(p).data >= 0.5, read_volume(g, "vessel"))
        prec, rec, dice = precision_recall_dice(c)
        assert (row["precision"], row["recall"], row["dice"]) == (prec, rec, dice)
        dices.append(dice)
    assert rep["aggregate"]["dice"]["mean"] == float(np.mean(dices))


def test_eval_bifurcation_matches_library(dataset, tmp_path):
    bif = dataset / "vol_000_bifurcation"
    tree = dataset / "vol_000_tree.json"
    assert main(["eval", "--task", "bifurcation", "--pred", str(bif), "--gt", str(tree),
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    pts = np.clip(np.floor(load_tree(tree).bifurcation_points() + 0.5), 0, 19)
    lib = bifurcation_hit_or_miss(read_volume(bif, "bifurcation").data, pts)
    row = rep["volumes"][0]
    assert row["recall"] == lib.recall and row["precision"] == lib.precision


def test_eval_shape_mismatch(dataset, tmp_path):
    other = tmp_path / "small"
    write_volume(LabelVolume(np.zeros((4, 4, 4))), other)
    assert main(["eval", "--pred", str(other), "--gt", str(dataset / "vol_000_vessel"),
                 "--out", str(tmp_path / "o")]) == 1


def test_bench_rows(tmp_path):
    assert main(["bench", "--sizes", "8", "--kernels", "1", "5", "--analytic-sizes", "128",
                 "--out", str(tmp_path / "a")]) == 0
    rows = json.loads((tmp_path / "a" / "opcounts.json").read_text())
    by = {(r["size"], r["kernel"]): r for r in rows}
    assert by[(128, 5)]["full3d_mults"] == 262_144_000 and by[(128, 5)]["crosshair_mults"] == 157_286_400
    assert by[(8, 1)]["full3d_mults"] == 512 and by[(8, 1)]["crosshair_mults"] == 3 * 512
    timings = json.loads((tmp_path / "a" / "timings.json").read_text())
    assert all(r["repeats"] >= 5 and r["time_ratio"] > 0 for r in timings)
    assert rerun_from_config(tmp_path / "a", tmp_path / "b") == 0
    assert (tmp_path / "a" / "opcounts.json").read_bytes() == (tmp_path / "b" / "opcounts.json").read_bytes()


def test_gradcheck_passes_and_is_deterministic(tmp_path):
    assert main(["gradcheck", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "gradcheck.json").read_text())
    assert rep["passed"] and len(rep["checks"]) == 7
    assert rerun_from_config(tmp_path / "a", tmp_path / "b") == 0
    assert files_of(tmp_path / "a") == files_of(tmp_path / "b")


def test_gradcheck_catches_sign_flip(tmp_path, monkeypatch, capsys):
    real = net.conv_layer_backward

    def flipped(*args, **kwargs):
        gfeat, gkern, gbias = real(*args, **kwargs)
        return (None if gfeat is None else -gfeat), gkern, gbias

    monkeypatch.setattr(net, "conv_layer_backward", flipped)
    assert main(["gradcheck", "--out", str(tmp_path)]) == 2
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert not rep["passed"]
    assert "FAIL" in capsys.readouterr().out
