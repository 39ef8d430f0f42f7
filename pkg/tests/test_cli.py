import csv
import io

import pytest

from mothtrap import cli
from mothtrap.data import synthetic_scene
from mothtrap.imageio import read_image, write_image
from mothtrap.telemetry import TrapReport, encode, to_hex
from mothtrap.weightfile import save_model
from mothtrap.zoo import build


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("m") / "lenet.pdnw"
    save_model(build("lenet5", seed=0), p)
    return p


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    img, _ = synthetic_scene(seed=3)
    p = tmp_path_factory.mktemp("s") / "scene.pgm"
    write_image(img, p)
    return p


def test_no_arguments_prints_usage():
    code, out, err = call()
    assert code == cli.EXIT_USAGE and "usage" in err


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert "exit codes" in capsys.readouterr().out.lower()


def test_unknown_command_and_flag():
    assert call("explode")[0] == cli.EXIT_USAGE
    assert call("simulate", "--bogus", "1")[0] == cli.EXIT_USAGE


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# trap settings\nthreshold = 0.6\nstride = 13\n")
    assert cli.resolve(["metrics", "--model", str(cfg), "--config", str(cfg)]).get("threshold") == 0.6
    r = cli.resolve(["metrics", "--model", str(cfg), "--config", str(cfg), "--threshold", "0.7"])
    assert r.get("threshold") == 0.7


def test_empty_config_gives_defaults(tmp_path):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("")
    r = cli.resolve(["simulate", "--config", str(cfg)])
    assert r.values == {o.key: o.default for o in cli.COMMANDS["simulate"][1]}


def test_config_errors_name_the_line(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("threshold = abc\n")
    code, _, err = call("simulate", "--config", str(cfg))
    assert code == cli.EXIT_USAGE
    assert "bad.cfg:1" in err and "threshold" in err
    cfg.write_text("\nlux = 5\ncolour = red\n")
    code, _, err = call("simulate", "--config", str(cfg))
    assert code == cli.EXIT_USAGE and "bad.cfg:3" in err and "unknown key" in err
    with pytest.raises(cli.ConfigError):
        cli.parse_config("no equals sign")


def test_simulate_csv(tmp_path):
    p = tmp_path / "soc.csv"
    code, out, _ = call("simulate", "--profile", "rpi3-lenet", "--lux", "7000", "--days", "3",
                        "--csv", str(p), "--summary")
    assert code == 0 and "98 days" in out
    rows = list(csv.DictReader(p.open()))
    assert rows[0]["event"] == "start"
    assert float(rows[-1]["soc"]) >= float(rows[0]["soc"])
    assert float(rows[-1]["t_seconds"]) == 3 * 86400


def test_simulate_depletion_exit_code():
    code, out, _ = call("simulate", "--profile", "rpi4-vgg16", "--lux", "0", "--days", "2", "--soc", "0.01")
    assert code == cli.EXIT_DEPLETED and "depleted" in out


def test_simulate_unknown_profile():
    code, _, err = call("simulate", "--profile", "rpi9-lenet")
    assert code == cli.EXIT_FORMAT and "rpi9-lenet" in err


def test_detect_end_to_end(tmp_path, model_file, scene_file):
    outs = [tmp_path / n for n in ("a.ppm", "d.csv", "r.bin")]
    argv = ["detect", "--image", str(scene_file), "--model", str(model_file), "--out", str(outs[0]),
            "--csv", str(outs[1]), "--report", str(outs[2]), "--trap-id", "7", "--timestamp", "1000",
            "--soc", "0.8", "--cycle"]
    code, out, _ = call(*argv)
    assert code == 0, out
    assert all(p.exists() for p in outs)
    assert read_image(outs[0]).pixels.shape[2] == 3
    assert "codling moth" in out.splitlines()[0]
    assert "estimated cycle energy (rpi3-lenet): 123.2 J" in out
    first = outs[2].read_bytes()
    assert len(first) == 11
    assert call(*argv)[0] == 0
    assert outs[2].read_bytes() == first


def test_detect_history_alert(tmp_path, model_file, scene_file):
    hist = tmp_path / "h.csv"
    hist.write_text("timestamp_min,moth_count\n100,2\n")
    code, out, _ = call("detect", "--image", str(scene_file), "--model", str(model_file),
                        "--history", str(hist), "--timestamp", "200")
    assert code == 0 and "ALERT" in out


def test_detect_errors(tmp_path, model_file, scene_file):
    assert call("detect", "--model", str(model_file))[0] == cli.EXIT_USAGE
    assert call("detect", "--image", str(tmp_path / "nope.pgm"), "--model", str(model_file))[0] == cli.EXIT_IO
    junk = tmp_path / "junk.pgm"
    junk.write_bytes(b"P9 nonsense")
    assert call("detect", "--image", str(junk), "--model", str(model_file))[0] == cli.EXIT_FORMAT
    assert call("detect", "--image", str(scene_file), "--model", str(model_file),
                "--threshold", "1.5")[0] == cli.EXIT_USAGE
    assert call("detect", "--image", str(scene_file), "--model", str(model_file),
                "--out", str(tmp_path / "missing" / "a.ppm"))[0] == cli.EXIT_IO


def test_detect_wrong_architecture(tmp_path):
    m = tmp_path / "vgg.pdnw"
    save_model(build("vgg16", seed=0), m)
    m.with_name("vgg.pdnw.json").unlink(missing_ok=True)
    img = tmp_path / "s.pgm"
    write_image(synthetic_scene(seed=1)[0], img)
    code, _, err = call("detect", "--image", str(img), "--model", str(m), "--arch", "lenet5")
    assert code in (cli.EXIT_FORMAT, cli.EXIT_MODEL) and "c1" in err


def test_report_decode(tmp_path):
    p = encode(TrapReport(5, 42, 3, 1, 90, True))
    code, out, _ = call("report-decode", "--hex", to_hex(p))
    assert code == 0 and "moth_count=3" in out and "alert=True" in out
    f = tmp_path / "r.bin"
    f.write_bytes(p[:10])
    assert call("report-decode", "--file", str(f))[0] == cli.EXIT_FORMAT
    assert call("report-decode")[0] == cli.EXIT_USAGE
    assert "trap_id=0" in call("report-decode", "--hex", "00" * 11)[1]


def test_gen_dataset_train_metrics_optimize(tmp_path):
    root = tmp_path / "ds"
    code, out, _ = call("gen-dataset", "--out", str(root), "--n-train", "40", "--n-test", "20", "--scenes", "2")
    assert code == 0
    assert (root / "scenes" / "scene_001.pgm").exists()
    w = tmp_path / "m.pdnw"
    h = tmp_path / "hist.csv"
    code, out, _ = call("train", "--data", str(root), "--epochs", "2", "--out", str(w), "--history-csv", str(h))
    assert code == 0 and "epoch   1" in out
    assert len(h.read_text().splitlines()) == 3
    code, out, _ = call("metrics", "--model", str(w), "--data", str(root))
    assert code == 0 and "F" in out
    o = tmp_path / "o.pdnw"
    code, out, _ = call("optimize", "--model", str(w), "--out", str(o), "--passes", "fold-bn,prune:0.5")
    assert code == 0 and o.exists() and "layers" in out
    assert call("optimize", "--model", str(w), "--out", str(o), "--passes", "melt")[0] == cli.EXIT_USAGE
