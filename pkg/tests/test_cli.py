import json

import pytest

from ics_seq2seq.cli import main

ATTACK = {"attacks": [{"start": 500, "duration": 200, "kind": "sensor-spoof-constant",
                       "target": "LIT-101", "magnitude": 950.0}]}


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny end-to-end pipeline shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    (root / "atk.json").write_text(json.dumps(ATTACK))
    d = {k: root / k for k in ("normal", "test", "models", "det", "rep")}
    codes = {
        "sim": main(["simulate", "--duration", "600", "--seed", "1", "--out", str(d["normal"])]),
        "sim_atk": main(["simulate", "--duration", "1200", "--seed", "2", "--script", str(root / "atk.json"),
                         "--out", str(d["test"])]),
        "train": main(["train", "--data", str(d["normal"] / "data.csv"), "--process", "1", "--epochs", "1",
                       "--hidden", "4", "--layers", "1", "--batch-size", "128", "--trials", "2",
                       "--out", str(d["models"])]),
        # a tiny threshold guarantees alerts on the untrained-ish model
        "detect": main(["detect", "--data", str(d["test"] / "data.csv"), "--models", str(d["models"]),
                        "--threshold", "0.01", "--out", str(d["det"])]),
        "evaluate": main(["evaluate", "--alerts", str(d["det"] / "alerts.jsonl"),
                          "--labels", str(d["test"] / "labels.csv"), "--out", str(d["rep"])]),
    }
    return root, d, codes


def test_pipeline_exit_codes(run):
    _, _, codes = run
    assert codes == {"sim": 0, "sim_atk": 0, "train": 0, "detect": 1, "evaluate": 0}


def test_simulate_outputs(run):
    _, d, _ = run
    assert sorted(manifest(d["normal"])["outputs"]) == ["data.csv", "plant.json", "schema.csv"]
    assert sorted(manifest(d["test"])["outputs"]) == \
        ["attacks.json", "data.csv", "labels.csv", "plant.json", "schema.csv"]
    assert (d["test"] / "labels.csv").read_text().count("\n") == 2
    assert len((d["normal"] / "data.csv").read_text().splitlines()) == 601


def test_train_outputs_and_logs(run):
    _, d, _ = run
    m = manifest(d["models"])
    assert list(m["outputs"]) == ["process_1.ckpt"]
    assert m["logs"] == ["logs/process_1_seed_0.csv", "logs/process_1_seed_1.csv"]
    assert m["config"]["model"]["hidden_dim"] == 4 and m["config"]["train"]["trials"] == 2


def test_detect_outputs(run):
    _, d, _ = run
    assert sorted(manifest(d["det"])["outputs"]) == ["alerts.jsonl", "errors_p1.csv", "ratings_p1.csv"]
    lines = (d["det"] / "alerts.jsonl").read_text().splitlines()
    assert lines and all(json.loads(x)["process_id"] == 1 for x in lines)
    # one error row per scored second: 1200 - 100 + 1 windows
    assert len((d["det"] / "errors_p1.csv").read_text().splitlines()) == 1 + 1101


def test_evaluate_outputs(run, capsys):
    _, d, _ = run
    assert sorted(manifest(d["rep"])["outputs"]) == \
        ["attacks.csv", "false_positives.csv", "fp_summary.csv", "report.txt", "timeline.png"]
    assert len((d["rep"] / "attacks.csv").read_text().splitlines()) == 2
    assert (d["rep"] / "timeline.png").read_bytes()[:4] == b"\x89PNG"


def test_commands_are_idempotent(run, tmp_path):
    root, d, _ = run
    again = {k: tmp_path / k for k in ("normal", "models", "det", "rep")}
    main(["simulate", "--duration", "600", "--seed", "1", "--out", str(again["normal"])])
    main(["train", "--data", str(d["normal"] / "data.csv"), "--process", "1", "--epochs", "1",
          "--hidden", "4", "--layers", "1", "--batch-size", "128", "--trials", "2", "--out", str(again["models"])])
    main(["detect", "--data", str(d["test"] / "data.csv"), "--models", str(d["models"]),
          "--threshold", "0.01", "--out", str(again["det"])])
    main(["evaluate", "--alerts", str(d["det"] / "alerts.jsonl"), "--labels", str(d["test"] / "labels.csv"),
          "--out", str(again["rep"])])
    for k in again:
        assert manifest(again[k])["outputs"] == manifest(d[k])["outputs"], k


def test_plot_errors(run, tmp_path):
    _, d, _ = run
    code = main(["plot-errors", "--errors", str(d["det"] / "errors_p1.csv"),
                 "--ratings", str(d["det"] / "ratings_p1.csv"), "--labels", str(d["test"] / "labels.csv"),
                 "--alerts", str(d["det"] / "alerts.jsonl"), "--per-tag", "--out", str(tmp_path)])
    assert code == 0
    for name in ("errors_p1.png", "errors_p1_tags.png"):
        assert (tmp_path / name).read_bytes()[:4] == b"\x89PNG"


def test_empty_alerts_give_all_undetected_report(run, tmp_path, capsys):
    _, d, _ = run
    (tmp_path / "none.jsonl").write_text("")
    code = main(["evaluate", "--alerts", str(tmp_path / "none.jsonl"), "--labels", str(d["test"] / "labels.csv"),
                 "--no-plot", "--out", str(tmp_path / "rep")])
    assert code == 0
    assert "detected 0/1" in capsys.readouterr().out
    assert not (tmp_path / "rep" / "timeline.png").exists()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('seed = 5\n[simulate]\nduration = 300\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(cfg), "--seed", "6", "--duration", "200",
                 "--out", str(tmp_path / "b")]) == 0
    assert manifest(tmp_path / "a")["seed"] == 5
    assert manifest(tmp_path / "b")["seed"] == 6
    assert len((tmp_path / "a" / "data.csv").read_text().splitlines()) == 301
    assert len((tmp_path / "b" / "data.csv").read_text().splitlines()) == 201


def test_unknown_config_key_is_usage_error(run, tmp_path, capsys):
    _, d, _ = run
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nepochz = 3\n")
    code = main(["train", "--config", str(cfg), "--data", str(d["normal"] / "data.csv"), "--out", str(tmp_path)])
    assert code == 2 and "epochz" in capsys.readouterr().err


@pytest.mark.parametrize("argv,message", [
    (["simulate", "--spec", "missing.json"], "plant spec not found"),
    (["train", "--data", "missing.csv"], "data file not found"),
    (["detect", "--data", "{normal}/data.csv", "--models", "missing.ckpt"], "model path not found"),
    (["train", "--data", "{normal}/data.csv", "--process", "9"], "invalid process id 9"),
    (["train", "--data", "{normal}/data.csv", "--process", "x"], "invalid process id"),
    (["train", "--data", "{test}/data.csv"], "attack-labeled"),
    (["evaluate", "--alerts", "{det}/alerts.jsonl", "--labels", "{bad}"], "bad.csv:2"),
])
def test_usage_errors_exit_2(run, tmp_path, capsys, argv, message):
    _, d, _ = run
    bad = tmp_path / "bad.csv"
    bad.write_text("id,start,end,tags,expected_detectable\n1,yesterday,now,LIT-101,true\n")
    argv = [a.format(normal=d["normal"], test=d["test"], det=d["det"], bad=bad) for a in argv]
    assert main(argv + ["--out", str(tmp_path / "out")]) == 2
    assert message in capsys.readouterr().err


def test_argparse_errors_exit_2(capsys):
    assert main(["train"]) == 2
    assert main(["frobnicate"]) == 2
