import csv
import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from rirfield import cli
from rirfield.baselines import RirIndex, predict_baseline
from rirfield.dataset import read_dataset
from rirfield.metrics import evaluate
from rirfield.roomsim import ReceiverPose, ShoeboxRoom, SimConfig, SourcePose, simulate_rir
from rirfield.signal import Waveform

REPO = Path(__file__).resolve().parents[1]

SMALL_GEN = {
    "room": {"dims": [6.0, 4.0, 3.0], "t60": 0.3},
    "sim": {"sample_rate": 16000, "rir_length": 0.064},
    "sources": {"count": 2},
    "orientations_per_source": 2,
    "receivers": {"spacing": 1.0, "height": 1.5},
    "proportions": [0.6, 0.2, 0.2],
}

TINY_FIELD = {"field": {"n_bounce": 24, "dim": 8, "enc_width": 16, "dec_width": 32},
              "schedule": {"batch_size": 16}}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "gen.json", SMALL_GEN)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    cfg = write_json(dataset / "train.json", TINY_FIELD)
    out = dataset / "run"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = cli.main(["train", "--config", str(cfg), "--data", str(dataset / "data"), "--model",
                         "inras++", "--epochs", "5", "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


def test_gen_writes_dataset(dataset, capsys):
    man = read_dataset(dataset / "data")
    # 6x4 grid at 1.0 m spacing inside a 0.3 m margin, one height, 2 sources x 2 yaws
    assert len(man) == 2 * 2 * 6 * 4
    assert {r.split for r in man.records} == {"train", "val", "test"}
    assert man.room.sabine_t60() == pytest.approx(0.3)
    cfg = json.loads((dataset / "data" / "config.json").read_text())
    assert cfg["command"] == "gen" and not (dataset / "data" / "INCOMPLETE").exists()


def test_gen_summary_and_rerun(dataset, tmp_path, capsys):
    cfg = write_json(tmp_path / "gen.json", SMALL_GEN)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    text = capsys.readouterr().out
    assert "wrote 96 records" in text and "T60" in text
    assert (tmp_path / "again" / "manifest.txt").read_bytes() == \
        (dataset / "data" / "manifest.txt").read_bytes()


def test_gen_invalid_absorption(tmp_path, capsys):
    bad = {**SMALL_GEN, "room": {"dims": [6.0, 4.0, 3.0], "absorption": 1.5}}
    cfg = write_json(tmp_path / "bad.json", bad)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err
    assert "room.absorption" in err
    assert (tmp_path / "o" / "INCOMPLETE").exists()


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_json(tmp_path / "bad.json", {"room": {"volume": 3}})
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "room.volume" in capsys.readouterr().err


def test_train_history_rows(trained):
    with open(trained / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    assert "val_stft_error" in rows[0]
    assert (trained / "model.bin").exists() and (trained / "model.json").exists()
    cfg = json.loads((trained / "config.json").read_text())["config"]
    assert cfg["field"]["kind"] == "inras++"
    # no --lambda: the kind's default weight applies
    assert cfg["field"]["lam"] is None
    assert cfg["schedule"]["seed"] == 1


def test_train_flags(dataset):
    defaults = cli.TRAIN_DEFAULTS
    cfg = cli.resolve("train", defaults, None, cli._overrides(cli.build_parser().parse_args(
        ["train", "--out", "x", "--model", "inras++", "--lambda", "2.0", "--bounce-mode", "2d",
         "--no-orientation"])))
    assert cfg["field"]["lam"] == 2.0 and cfg["field"]["bounce_mode"] == "2d"
    assert cfg["field"]["use_orientation"] is False
    assert cfg["schedule"]["epochs"] == 200 and cfg["schedule"]["batch_size"] == 128


def test_unknown_model(dataset, tmp_path, capsys):
    code = cli.main(["train", "--data", str(dataset / "data"), "--model", "nacf", "--epochs", "1",
                     "--out", str(tmp_path / "r")])
    assert code != 0 and "nacf" in capsys.readouterr().err


def test_eval_nearest(dataset, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--data", str(dataset / "data"), "--model", "nearest", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    data, _ = cli.load_set(dataset / "data", "test")
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + len(data) + 1
    # pass-through: same numbers as evaluating the baseline predictions directly
    tr, _ = cli.load_set(dataset / "data", "train")
    pred = predict_baseline("nearest", RirIndex(tr), data)
    direct = evaluate([Waveform(p, 16000) for p in pred], data.as_waveforms())
    assert report["stft_err"] == pytest.approx(direct.stft_err)
    assert report["t60_err"] == pytest.approx(direct.t60_err)


def test_eval_checkpoint_generalisation_gap(dataset, tmp_path):
    cfg = write_json(tmp_path / "t.json", {"field": {"n_bounce": 32, "dim": 16, "enc_width": 32,
                                                     "dec_width": 64},
                                           "schedule": {"batch_size": 8, "lr": 3e-3}})
    run = tmp_path / "run"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert cli.main(["train", "--config", str(cfg), "--data", str(dataset / "data"), "--model",
                         "inras", "--epochs", "40", "--out", str(run)]) == 0
    errs = {}
    for split in ("train", "test"):
        out = tmp_path / f"ev_{split}"
        assert cli.main(["eval", "--data", str(dataset / "data"), "--model", str(run), "--split", split,
                         "--out", str(out)]) == 0
        errs[split] = json.loads((out / "report.json").read_text())["stft_err"]
    assert errs["train"] < errs["test"]


def test_loudness_checkpoint(dataset, trained, tmp_path):
    outs = []
    for yaw in ("0", "3.14159"):
        out = tmp_path / f"l{yaw}"
        assert cli.main(["loudness", "--data", str(dataset / "data"), "--model", str(trained),
                         "--emitter", "2", "2", "1.5", "--yaw", yaw, "--out", str(out)]) == 0
        outs.append(out)
    head = (outs[0] / "top.pgm").read_bytes()[:16].split(b"\n")
    assert head[0] == b"P5" and head[1] == b"60 40"
    assert len((outs[0] / "top.csv").read_text().splitlines()) == 1 + 60 * 40
    assert len((outs[0] / "side.csv").read_text().splitlines()) == 1 + 60 * 30
    assert (outs[0] / "top.csv").read_text() != (outs[1] / "top.csv").read_text()


def test_loudness_outside(dataset, tmp_path):
    assert cli.main(["loudness", "--data", str(dataset / "data"), "--model", "sim",
                     "--emitter", "7", "2", "1.5", "--out", str(tmp_path / "o")]) != 0


def test_loudness_decreases_with_distance():
    room = ShoeboxRoom.uniform((6, 4, 3), 0.4)
    sim = SimConfig(16000, 0.064)

    def fn(s, r, th):
        return np.stack([simulate_rir(room, SourcePose(tuple(a)), ReceiverPose(tuple(b)), sim).samples
                         for a, b in zip(s, r)])

    top, _, (xs, ys, _) = cli.loudness_grid(fn, room.dims, (1.0, 2.0, 1.5), (0.0, 0.0), 0.5, 1.5, 2.0)
    assert top.shape == (8, 12)
    X, Y = np.meshgrid(xs, ys)
    dist = np.hypot(X - 1.0, Y - 2.0)
    near, far = top[dist < 1.0].mean(), top[dist > 3.5].mean()
    assert near > far
    rho = np.corrcoef(dist.ravel(), top.ravel())[0, 1]
    assert rho < -0.5


def test_replay_identical(dataset, trained, tmp_path):
    assert cli.main(["replay", str(trained), "--out", str(tmp_path / "re")]) == 0
    assert (tmp_path / "re" / "model.bin").read_bytes() == (trained / "model.bin").read_bytes()
    assert (tmp_path / "re" / "history.csv").read_text() == (trained / "history.csv").read_text()
    assert cli.main(["replay", str(dataset / "data"), "--out", str(tmp_path / "gen_re")]) == 0
    assert (tmp_path / "gen_re" / "manifest.txt").read_bytes() == \
        (dataset / "data" / "manifest.txt").read_bytes()


def test_persisted_config_as_input(trained, tmp_path):
    saved = trained / "config.json"
    cfg = cli.resolve("train", cli.TRAIN_DEFAULTS, saved, {})
    assert cfg == json.loads(saved.read_text())["config"]
    with pytest.raises(Exception):
        cli.resolve("gen", cli.GEN_DEFAULTS, saved, {})


def test_fewshot_cli(dataset, tmp_path):
    gen = write_json(tmp_path / "g.json", {**SMALL_GEN, "sim": {"sample_rate": 16000, "rir_length": 0.064,
                                                                "directivity": "omni"}})
    assert cli.main(["gen", "--config", str(gen), "--t60-from", str(dataset / "data"),
                     "--out", str(tmp_path / "sim")]) == 0
    fcfg = write_json(tmp_path / "f.json", {"field": TINY_FIELD["field"],
                                            "pretrain": {"batch_size": 16}, "patience": 2})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = cli.main(["fewshot", "--config", str(fcfg), "--sim", str(tmp_path / "sim"), "--real",
                         str(dataset / "data"), "--models", "inras++:sim2real,linear", "--fractions",
                         "50,100", "--epochs", "1", "--finetune-epochs", "2", "--out", str(tmp_path / "fs")])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "fs" / "fewshot.csv")))
    assert len(rows) == 4


def test_fewshot_defaults():
    assert cli.FEWSHOT_DEFAULTS["plan"]["fractions"] == (0.3, 1.0, 5.0, 20.0, 100.0)


def test_missing_dataset(tmp_path):
    assert cli.main(["fewshot", "--sim", str(tmp_path / "nope"), "--real", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) != 0


def test_example_configs_resolve():
    cfg = cli.resolve("gen", cli.GEN_DEFAULTS, REPO / "configs" / "gen_benchmark.json", {})
    assert cfg["room"]["dims"] == [6.0, 4.0, 3.0] and cfg["max_records"] == 2500
    cfg = cli.resolve("train", cli.TRAIN_DEFAULTS, REPO / "configs" / "train_inras_pp.json", {})
    assert cfg["field"]["lam"] == 2.0
